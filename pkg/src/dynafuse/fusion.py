"""Feature modulation and channel/space dynamic fusion of two modalities."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import grid_core as gc
from .align import uniform_fan_in
from .grid_core import Var

ORDERS = ("channel_space", "space_channel")


MERGE_INPUTS = ("concat", "sum")

# ax * g is 1/4 at the neutral point (ax = ay = g = 1/2); the merge conv reads
# its input scaled back up so it trains at the same pace as a plain merge
MERGE_GAIN = 4.0


def init_fusion(rng: np.random.Generator, channels: int, reduction: int = 4,
                prefix: str = "fuse.", merge_input: str = "concat") -> dict[str, np.ndarray]:
    """``merge_input="concat"``: the merge conv reads both weighted branches
    (2C -> C). ``"sum"``: it reads their sum (C -> C). Either way the centre
    taps start at 1/2, so with neutral gates the fusion begins as the plain
    averaging merge."""
    if merge_input not in MERGE_INPUTS:
        raise ValueError(f"unknown merge input {merge_input!r}; expected one of {MERGE_INPUTS}")
    c, r = channels, max(1, channels // reduction)
    if merge_input == "concat":
        merge_w = uniform_fan_in(rng, (c, 2 * c, 3, 3), gain=0.5)
        merge_w[np.arange(c), np.arange(c), 1, 1] += 0.5
        merge_w[np.arange(c), np.arange(c) + c, 1, 1] += 0.5
    else:
        merge_w = uniform_fan_in(rng, (c, c, 3, 3), gain=0.5)
        merge_w[np.arange(c), np.arange(c), 1, 1] += 0.5
    return {
        prefix + "sk_reduce_w": uniform_fan_in(rng, (r, c)),
        prefix + "sk_reduce_b": np.zeros(r),
        prefix + "sk_x_w": uniform_fan_in(rng, (c, r)),
        prefix + "sk_x_b": np.zeros(c),
        prefix + "sk_y_w": uniform_fan_in(rng, (c, r)),
        prefix + "sk_y_b": np.zeros(c),
        prefix + "spatial_w": uniform_fan_in(rng, (1, 2 * c, 3, 3)),
        prefix + "spatial_b": np.zeros(1),
        prefix + "merge_w": merge_w,
        prefix + "merge_b": np.zeros(c),
    }


def init_baseline_merge(rng: np.random.Generator, channels: int, prefix: str = "base.") -> dict[str, np.ndarray]:
    c = channels
    w = uniform_fan_in(rng, (c, 2 * c, 3, 3), gain=0.5)
    w[np.arange(c), np.arange(c), 1, 1] += 0.5
    w[np.arange(c), np.arange(c) + c, 1, 1] += 0.5
    return {prefix + "merge_w": w, prefix + "merge_b": np.zeros(c)}


def baseline_merge(fx, fy, p: Mapping, prefix: str = "base.") -> Var:
    """Plain concat + 3x3 conv fusion."""
    return gc.conv2d(gc.concat([fx, fy], axis=0), p[prefix + "merge_w"], p[prefix + "merge_b"])


def normalize_error_map(E) -> Var:
    """E / max(E), so the gate lies in (0, 1]."""
    E = gc.as_var(E)
    return E / gc.vmax(E)


GATES = ("log_minmax", "max")


def error_gate(mu, eps, mode: str = "log_minmax") -> Var:
    """Spatial gate in [0, 1] from an error distribution, computed from
    log E = -log(eps) - mu^2 / eps^2 so it never underflows.

    ``max`` is E / max(E). ``log_minmax`` rescales log E to [0, 1] over the
    map; for a spatially constant eps that is 1 - (mu^2 - min mu^2) / range,
    independent of how small eps has become.
    """
    tape = gc._tape_of(mu, eps)
    mu, eps = gc.as_var(mu, tape), gc.as_var(eps, tape)
    log_e = -gc.log(eps) - gc.square(mu) / gc.square(eps)
    hi = gc.vmax(log_e)
    if mode == "max":
        return gc.exp(log_e - hi)
    if mode == "log_minmax":
        lo = -gc.vmax(-log_e)
        return (log_e - lo) / (hi - lo + 1e-12)
    raise ValueError(f"unknown gate {mode!r}; expected one of {GATES}")


def modulate(fz, pz=None, ez_hat=None) -> Var:
    """F' = F * (1 + tanh(P)) * E_hat; either factor may be absent."""
    out = gc.as_var(fz, gc._tape_of(fz, pz, ez_hat))
    if pz is not None:
        out = out * (gc.tanh(pz) + 1.0)
    if ez_hat is not None:
        e = gc.as_var(ez_hat, out.tape)
        out = out * e.reshape((1,) + e.shape[-2:])
    return out


def sk_channel_fuse(fx, fy, p: Mapping, prefix: str = "fuse."):
    """Selective-kernel weighting of the two branches.

    Returns per-channel weights (ax, ay), ax + ay = 1, and ax*fx + ay*fy.
    """
    tape = gc._tape_of(fx, fy, *p.values())
    fx, fy = gc.as_var(fx, tape), gc.as_var(fy, tape)
    if fx.shape != fy.shape:
        raise ValueError(f"shape mismatch {fx.shape} vs {fy.shape}")
    s = gc.mean(fx + fy, axis=(1, 2))
    z = gc.relu(gc.conv1x1(s, p[prefix + "sk_reduce_w"], p[prefix + "sk_reduce_b"]))
    lx = gc.conv1x1(z, p[prefix + "sk_x_w"], p[prefix + "sk_x_b"])
    ly = gc.conv1x1(z, p[prefix + "sk_y_w"], p[prefix + "sk_y_b"])
    w = gc.softmax(gc.concat([lx.reshape(1, -1), ly.reshape(1, -1)], axis=0), axis=0)
    ax, ay = w[0], w[1]
    c = fx.shape[0]
    fc = fx * ax.reshape(c, 1, 1) + fy * ay.reshape(c, 1, 1)
    return ax, ay, fc


def spatial_gate(fx, fy, p: Mapping, prefix: str = "fuse.") -> Var:
    """logistic(3x3 conv of concat(fx, fy)), shape (1, H, W)."""
    return gc.sigmoid(gc.conv2d(gc.concat([fx, fy], axis=0), p[prefix + "spatial_w"], p[prefix + "spatial_b"]))


def merge(x, p: Mapping, prefix: str = "fuse.") -> Var:
    return gc.conv2d(x, p[prefix + "merge_w"], p[prefix + "merge_b"])


def spatial_fuse(fc, fx, fy, p: Mapping, prefix: str = "fuse.") -> Var:
    """Gate ``fc`` with the spatial map of (fx, fy) and merge (C -> C)."""
    g = spatial_gate(fx, fy, p, prefix)
    return merge(gc.mul(fc, g), p, prefix)


def _per_channel(w: Var, c: int) -> Var:
    return w.reshape(c, 1, 1)


def dynamic_fuse(fx, fy, p: Mapping, order: str = "channel_space", prefix: str = "fuse.") -> Var:
    """Channel (SK) and spatial weighting in the given order, then the merge
    conv over the gated branches times MERGE_GAIN. The merge input width
    (C or 2C) is read off its weights."""
    if order not in ORDERS:
        raise ValueError(f"unknown fusion order {order!r}; expected one of {ORDERS}")
    tape = gc._tape_of(fx, fy, *p.values())
    fx, fy = gc.as_var(fx, tape), gc.as_var(fy, tape)
    c = fx.shape[0]
    concat_merge = p[prefix + "merge_w"].shape[1] == 2 * c
    if order == "channel_space":
        ax, ay, fc = sk_channel_fuse(fx, fy, p, prefix)
        bx, by = fx * _per_channel(ax, c), fy * _per_channel(ay, c)
        g = spatial_gate(bx, by, p, prefix)
    else:
        g = spatial_gate(fx, fy, p, prefix)
        ax, ay, fc = sk_channel_fuse(gc.mul(fx, g), gc.mul(fy, g), p, prefix)
        bx, by = fx * _per_channel(ax, c), fy * _per_channel(ay, c)
    if concat_merge:
        return merge(gc.concat([gc.mul(bx, g), gc.mul(by, g)], axis=0) * MERGE_GAIN, p, prefix)
    return merge(gc.mul(bx + by, g) * MERGE_GAIN, p, prefix)
