"""Heatmap-level modal interaction.

Three attention variants share one call signature ``attend(query, value,
params, prefix)``:

* ``deformable``: per query cell, offsets and per-head attention logits are
  predicted from the query vector; the projected value map is sampled
  bilinearly at reference + offset and combined with softmax-over-points
  weights.
* ``local``: fixed 3x3 neighbourhood with learnable (location-independent)
  weights.
* ``global``: dense scaled dot-product attention over every cell.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import grid_core as gc
from .align import uniform_fan_in
from .grid_core import Var

MODES = ("deformable", "local", "global")
_CHUNK = 512


def _value_out_init(rng, heads: int, classes: int, noise: float):
    value_w = np.repeat(np.eye(classes)[None], heads, axis=0)
    out_w = np.repeat(np.eye(classes)[None], heads, axis=0) / heads
    if noise:
        value_w = value_w + rng.uniform(-noise, noise, value_w.shape)
        out_w = out_w + rng.uniform(-noise, noise, out_w.shape) / heads
    return value_w, out_w


def init_attention(rng: np.random.Generator, classes: int, prefix: str, mode: str = "deformable",
                   heads: int = 4, points: int = 4, noise: float = 0.1) -> dict[str, np.ndarray]:
    """Projections start near identity (head outputs averaged); offsets and
    attention logits start at zero, i.e. plain sampling at the reference."""
    if mode not in MODES:
        raise ValueError(f"unknown interaction mode {mode!r}")
    if heads < 1 or points < 1:
        raise ValueError("attention needs at least one head and one sampling point")
    value_w, out_w = _value_out_init(rng, heads, classes, noise)
    p = {prefix + "value_w": value_w, prefix + "out_w": out_w}
    if mode == "deformable":
        p[prefix + "off_w"] = np.zeros((heads * points * 2, classes))
        p[prefix + "off_b"] = np.zeros(heads * points * 2)
        p[prefix + "attn_w"] = np.zeros((heads * points, classes))
        p[prefix + "attn_b"] = np.zeros(heads * points)
    elif mode == "local":
        p[prefix + "local_logits"] = np.zeros((heads, 9))
    else:
        p[prefix + "q_w"] = uniform_fan_in(rng, (heads, classes, classes))
        p[prefix + "k_w"] = uniform_fan_in(rng, (heads, classes, classes))
    return p


def mode_of(p: Mapping, prefix: str) -> str:
    if prefix + "off_w" in p:
        return "deformable"
    if prefix + "local_logits" in p:
        return "local"
    if prefix + "q_w" in p:
        return "global"
    raise KeyError(f"no attention parameters under {prefix!r}")


def reference_points(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-coordinate (x, y) of every query cell, each (H, W)."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def _project_values(value: Var, value_w) -> Var:
    # (M, D, C) x (C, H, W) -> (M, D, H, W)
    return gc.einsum("mdc,chw->mdhw", value_w, value)


def _combine_heads(out_w, heads_out: Var) -> Var:
    # (M, C, D) x (M, D, H, W) -> (C, H, W)
    return gc.einsum("mcd,mdhw->chw", out_w, heads_out)


def deformable_attend(query, value, p: Mapping, prefix: str = "", ref_points=None) -> Var:
    tape = gc._tape_of(query, value, *(p[k] for k in p if k.startswith(prefix)))
    query, value = gc.as_var(query, tape), gc.as_var(value, tape)
    if query.shape[1:] != value.shape[1:]:
        raise ValueError(f"query {query.shape} and value {value.shape} differ spatially")
    value_w, out_w = p[prefix + "value_w"], p[prefix + "out_w"]
    M = value_w.shape[0]
    MK = p[prefix + "attn_w"].shape[0]
    if M == 0 or MK == 0:
        raise ValueError("attention needs at least one head and one sampling point")
    K = MK // M
    _, H, W = query.shape
    rx, ry = reference_points(H, W) if ref_points is None else ref_points

    offsets = gc.conv1x1(query, p[prefix + "off_w"], p[prefix + "off_b"]).reshape(M, K, 2, H, W)
    logits = gc.conv1x1(query, p[prefix + "attn_w"], p[prefix + "attn_b"]).reshape(M, K, H, W)
    attn = gc.softmax(logits, axis=1)

    xs = gc.add(offsets[:, :, 0], rx)
    ys = gc.add(offsets[:, :, 1], ry)
    heads_out = gc.deform_sum(_project_values(value, value_w), xs, ys, attn)
    return _combine_heads(out_w, heads_out)


_LOCAL_DX = np.array([-1, 0, 1, -1, 0, 1, -1, 0, 1], dtype=np.float64)
_LOCAL_DY = np.array([-1, -1, -1, 0, 0, 0, 1, 1, 1], dtype=np.float64)


def local_attend(query, value, p: Mapping, prefix: str = "", ref_points=None) -> Var:
    tape = gc._tape_of(query, value, *(p[k] for k in p if k.startswith(prefix)))
    query, value = gc.as_var(query, tape), gc.as_var(value, tape)
    if query.shape[1:] != value.shape[1:]:
        raise ValueError(f"query {query.shape} and value {value.shape} differ spatially")
    value_w, out_w = p[prefix + "value_w"], p[prefix + "out_w"]
    M = value_w.shape[0]
    _, H, W = query.shape
    rx, ry = reference_points(H, W) if ref_points is None else ref_points
    xs = np.broadcast_to(rx[None, None] + _LOCAL_DX[None, :, None, None], (M, 9, H, W)).reshape(M, -1)
    ys = np.broadcast_to(ry[None, None] + _LOCAL_DY[None, :, None, None], (M, 9, H, W)).reshape(M, -1)
    attn = gc.softmax(p[prefix + "local_logits"], axis=1).reshape(M, 1, 9, 1, 1)
    V = _project_values(value, value_w)
    D = V.shape[1]
    samples = gc.sample(V, xs, ys).reshape(M, D, 9, H, W)
    return _combine_heads(out_w, gc.vsum(samples * attn, axis=2))


def _np_softmax_rows(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def dense_attention(q, k, v) -> Var:
    """softmax(q^T k / sqrt(D)) applied to v, per head. q, k: (M, D, N),
    v: (M, Dv, N). Attention rows are recomputed in chunks during the
    backward pass instead of being stored."""
    tape, (q, k, v) = gc._lift(q, k, v)
    qv, kv, vv = q.value, k.value, v.value
    M, D, N = qv.shape
    scale = 1.0 / np.sqrt(D)
    out = np.empty((M, vv.shape[1], N))
    for s in range(0, N, _CHUNK):
        A = _np_softmax_rows(np.einsum("mdn,mdj->mnj", qv[:, :, s:s + _CHUNK], kv) * scale)
        out[:, :, s:s + _CHUNK] = np.einsum("mvj,mnj->mvn", vv, A)

    def vjp(g):
        gq = np.zeros_like(qv)
        gk = np.zeros_like(kv)
        gv = np.zeros_like(vv)
        for s in range(0, N, _CHUNK):
            qc = qv[:, :, s:s + _CHUNK]
            gc_ = g[:, :, s:s + _CHUNK]
            A = _np_softmax_rows(np.einsum("mdn,mdj->mnj", qc, kv) * scale)
            gv += np.einsum("mvn,mnj->mvj", gc_, A)
            gA = np.einsum("mvn,mvj->mnj", gc_, vv)
            gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True)) * scale
            gq[:, :, s:s + _CHUNK] = np.einsum("mdj,mnj->mdn", kv, gS)
            gk += np.einsum("mdn,mnj->mdj", qc, gS)
        return gq, gk, gv

    return tape.record(out, (q, k, v), vjp)


def global_attend(query, value, p: Mapping, prefix: str = "", ref_points=None) -> Var:
    tape = gc._tape_of(query, value, *(p[k] for k in p if k.startswith(prefix)))
    query, value = gc.as_var(query, tape), gc.as_var(value, tape)
    if query.shape[1:] != value.shape[1:]:
        raise ValueError(f"query {query.shape} and value {value.shape} differ spatially")
    _, H, W = query.shape
    M = p[prefix + "value_w"].shape[0]
    qf = _project_values(query, p[prefix + "q_w"]).reshape(M, -1, H * W)
    kf = _project_values(value, p[prefix + "k_w"]).reshape(M, -1, H * W)
    V = _project_values(value, p[prefix + "value_w"])
    D = V.shape[1]
    heads_out = dense_attention(qf, kf, V.reshape(M, D, H * W)).reshape(M, D, H, W)
    return _combine_heads(p[prefix + "out_w"], heads_out)


_DISPATCH = {"deformable": deformable_attend, "local": local_attend, "global": global_attend}


def attend(query, value, p: Mapping, prefix: str = "") -> Var:
    return _DISPATCH[mode_of(p, prefix)](query, value, p, prefix)


def cross_interaction(fx_star, fy_star, p: Mapping, prefixes=("mi.cross_x.", "mi.cross_y.")):
    """Each modality's heatmap queries the other's: returns (Px*, Py*)."""
    if fx_star.shape != fy_star.shape:
        raise ValueError(f"heatmap shape mismatch {fx_star.shape} vs {fy_star.shape}")
    px = attend(fx_star, fy_star, p, prefixes[0])
    py = attend(fy_star, fx_star, p, prefixes[1])
    return px, py


def self_interaction(fz_star, p: Mapping, prefix: str) -> Var:
    return attend(fz_star, fz_star, p, prefix)


@dataclass
class PotentialEnergyMap:
    P: Var
    P_star: Var
    H_star: Var


def init_potential_conv(classes: int, channels: int, prefix: str) -> dict[str, np.ndarray]:
    # zero start: the interaction begins as a no-op on the features
    return {prefix + "w": np.zeros((channels, 2 * classes, 3, 3)), prefix + "b": np.zeros(channels)}


def potential_energy_map(p_star, h_star, p: Mapping, prefix: str) -> PotentialEnergyMap:
    if p_star.shape != h_star.shape:
        raise ValueError(f"shape mismatch {p_star.shape} vs {h_star.shape}")
    P = gc.conv2d(gc.concat([p_star, h_star], axis=0), p[prefix + "w"], p[prefix + "b"])
    return PotentialEnergyMap(P, gc.as_var(p_star, P.tape), gc.as_var(h_star, P.tape))
