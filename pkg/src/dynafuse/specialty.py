"""Per-modality offset/uncertainty heads, perception maps and their loss."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import grid_core as gc
from .align import uniform_fan_in
from .boxes import BevBox
from .grid_core import GridSpec, Var

EPS_MIN = 1e-3
D_MAX = 8.0
ZETA = 2000.0


def head_prefix(modality: str, shared: bool = False) -> str:
    return "se.shared." if shared else f"se.{modality}."


MU_BIAS = -4.0


def init_specialty_head(rng: np.random.Generator, channels: int, prefix: str,
                        mu_bias: float = MU_BIAS) -> dict[str, np.ndarray]:
    """Two 3x3 conv layers per branch. The offset branch starts near zero
    (softplus(mu_bias)), so E starts nearly flat; the ``max`` gate is then
    open everywhere."""
    p = {}
    for branch, bias in (("mu", mu_bias), ("eps", 0.0)):
        p[f"{prefix}{branch}_w0"] = uniform_fan_in(rng, (channels, channels, 3, 3))
        p[f"{prefix}{branch}_b0"] = np.zeros(channels)
        p[f"{prefix}{branch}_w1"] = uniform_fan_in(rng, (1, channels, 3, 3))
        p[f"{prefix}{branch}_b1"] = np.full(1, float(bias))
    return p


def _branch(f, p: Mapping, prefix: str, branch: str) -> Var:
    h = gc.relu(gc.conv2d(f, p[f"{prefix}{branch}_w0"], p[f"{prefix}{branch}_b0"]))
    h = gc.conv2d(h, p[f"{prefix}{branch}_w1"], p[f"{prefix}{branch}_b1"])
    return h.reshape(h.shape[1:])


def predict_offset_uncertainty(f, p: Mapping, prefix: str, eps_min: float = EPS_MIN) -> tuple[Var, Var]:
    """(mu, eps) maps, each H x W: mu = softplus(.) >= 0, eps = softplus(.) + eps_min."""
    tape = gc._tape_of(f, *p.values())
    f = gc.as_var(f, tape)
    if f.shape[0] != p[f"{prefix}mu_w0"].shape[1]:
        raise ValueError(f"channel mismatch: features have {f.shape[0]} channels")
    mu = gc.softplus(_branch(f, p, prefix, "mu"))
    eps = gc.softplus(_branch(f, p, prefix, "eps")) + eps_min
    return mu, eps


def error_distribution(mu, eps):
    """(1/eps) * exp(-mu^2 / eps^2), pointwise. Arrays in, array out;
    Vars in, Var out."""
    if not isinstance(mu, Var) and not isinstance(eps, Var):
        mu = np.asarray(mu, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if np.any(eps <= 0):
            raise ValueError("uncertainty must be strictly positive")
        return np.exp(-(mu * mu) / (eps * eps)) / eps
    tape = gc._tape_of(mu, eps)
    mu, eps = gc.as_var(mu, tape), gc.as_var(eps, tape)
    if np.any(eps.value <= 0):
        raise ValueError("uncertainty must be strictly positive")
    return gc.exp(-(gc.square(mu) / gc.square(eps))) / eps


def target_offsets(boxes: Sequence[BevBox], spec: GridSpec, d_max: float = D_MAX) -> np.ndarray:
    """Distance (m) from each cell center to the nearest box center,
    clipped at d_max and scaled to [0, 1]. No boxes -> all ones."""
    gx, gy = spec.cell_centers()
    if not boxes:
        return np.ones_like(gx)
    d = np.full(gx.shape, np.inf)
    for b in boxes:
        np.minimum(d, np.hypot(gx - b.cx, gy - b.cy), out=d)
    return np.minimum(d, d_max) / d_max


def specialty_loss(mu_x, eps_x, mu_y, eps_y, mu_star, zeta: float = ZETA) -> Var:
    """(zeta / N) * sum over modalities of (||mu_z - mu*||^2 + ||eps_z||^2)."""
    tape = gc._tape_of(mu_x, eps_x, mu_y, eps_y)
    mu_x, eps_x, mu_y, eps_y = (gc.as_var(v, tape) for v in (mu_x, eps_x, mu_y, eps_y))
    target = np.asarray(getattr(mu_star, "value", mu_star), dtype=np.float64)
    for v in (mu_x, eps_x, mu_y, eps_y):
        if v.shape != target.shape:
            raise ValueError(f"shape mismatch {v.shape} vs target {target.shape}")
    n = target.size
    total = 0.0
    for mu, eps in ((mu_x, eps_x), (mu_y, eps_y)):
        total = total + gc.vsum(gc.square(mu - target)) + gc.vsum(gc.square(eps))
    return total * (zeta / n)
