"""Center-peak detection head, instance matching and the instance-weighted
detection objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from . import grid_core as gc
from .align import uniform_fan_in
from .boxes import BevBox, bev_iou
from .grid_core import GridSpec, Var
from .heatmap import gaussian_focal_loss

ALT_MODES = ("none", "cls", "iou", "both")
P_CLAMP = 1e-4
_LOG_SIZE_CLIP = 4.0

__all__ = [
    "BevBox", "bev_iou", "Instance", "LossCoeffs", "LossBreakdown", "MatchedTerm",
    "init_head", "head_outputs", "decode_instances", "decode_maps", "match_instances",
    "instance_quality", "focal_cls_loss", "l1_loc_loss", "box_vector", "total_loss",
]


@dataclass
class Instance:
    box: BevBox
    class_scores: np.ndarray
    cell: tuple[int, int]
    matched_gt: int | None = None
    quality: float = 0.0
    weight: float = 1.0

    @property
    def score(self) -> float:
        return float(self.box.score)


@dataclass(frozen=True)
class LossCoeffs:
    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss coefficients must be non-negative")


def init_head(rng: np.random.Generator, channels: int, classes: int, cls_bias: float = -2.19,
              log_size: float = 0.7, decoder_layers: int = 0) -> dict[str, np.ndarray]:
    p = {}
    for i in range(decoder_layers):
        # 3x3 decoder convs, identity centre tap plus noise
        w = np.zeros((channels, channels, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        p[f"decoder.w{i}"] = w + uniform_fan_in(rng, w.shape, gain=0.5)
        p[f"decoder.b{i}"] = np.zeros(channels)
    p.update({
        "head.cls_w": uniform_fan_in(rng, (classes, channels)),
        "head.cls_b": np.full(classes, cls_bias),
        "head.reg_w": uniform_fan_in(rng, (4, channels), gain=0.1),
        "head.reg_b": np.array([0.0, 0.0, log_size, log_size]),
    })
    return p


def decode_features(fused, p: Mapping) -> Var:
    x = gc.as_var(fused, gc._tape_of(fused, *p.values()))
    i = 0
    while f"decoder.w{i}" in p:
        x = gc.relu(gc.conv2d(x, p[f"decoder.w{i}"], p[f"decoder.b{i}"]))
        i += 1
    return x


def head_outputs(fused, p: Mapping) -> tuple[Var, Var]:
    """(class heatmap in (0,1), raw regression maps [dx, dy, log l, log w]).
    Any ``decoder.*`` convs run first."""
    x = decode_features(fused, p)
    heat = gc.sigmoid(gc.conv1x1(x, p["head.cls_w"], p["head.cls_b"]))
    reg = gc.conv1x1(x, p["head.reg_w"], p["head.reg_b"])
    return heat, reg


def decode_maps(heat: np.ndarray, reg: np.ndarray, spec: GridSpec, top_k: int,
                score_thresh: float) -> list[Instance]:
    """Peaks of a (K, H, W) score map that are strict maxima of their 3x3
    neighbourhood (flat plateaus give nothing), strictly above
    ``score_thresh``, best ``top_k`` first (ties broken by class-major flat
    cell index)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    heat = np.asarray(heat)
    ring = np.ones((1, 3, 3), dtype=bool)
    ring[0, 1, 1] = False
    neigh = maximum_filter(heat, footprint=ring, mode="constant", cval=-np.inf)
    peaks = (heat > neigh) & (heat > score_thresh)
    flat = np.flatnonzero(peaks)
    if flat.size == 0:
        return []
    scores = heat.ravel()[flat]
    order = np.lexsort((flat, -scores))[:top_k]
    K, H, W = heat.shape
    out = []
    for i in order:
        k, rem = divmod(int(flat[i]), H * W)
        r, c = divmod(rem, W)
        dx, dy, ll, lw = reg[:, r, c]
        cx = spec.x_min + (c + 0.5 + dx) * spec.cell_size
        cy = spec.y_min + (r + 0.5 + dy) * spec.cell_size
        box = BevBox(k, float(cx), float(cy),
                     float(math.exp(np.clip(ll, -_LOG_SIZE_CLIP, _LOG_SIZE_CLIP))),
                     float(math.exp(np.clip(lw, -_LOG_SIZE_CLIP, _LOG_SIZE_CLIP))),
                     score=float(scores[i]))
        out.append(Instance(box, heat[:, r, c].copy(), (r, c)))
    return out


def decode_instances(fused, p: Mapping, spec: GridSpec, top_k: int = 50,
                     score_thresh: float = 0.1) -> list[Instance]:
    heat, reg = head_outputs(fused, p)
    return decode_maps(heat.value, reg.value, spec, top_k, score_thresh)


def match_instances(preds: Sequence[Instance], gts: Sequence[BevBox], radius: float = 2.0) -> dict[int, int]:
    """Greedy one-to-one matching: by descending score (stable in input
    order), each prediction takes the nearest unclaimed same-class GT within
    ``radius`` metres. Returns {pred index: gt index}."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    claimed: set[int] = set()
    out: dict[int, int] = {}
    for i in order:
        b = preds[i].box
        best, best_d = None, radius
        for j, g in enumerate(gts):
            if j in claimed or g.class_id != b.class_id:
                continue
            d = math.hypot(g.cx - b.cx, g.cy - b.cy)
            if d <= best_d and (best is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            claimed.add(best)
            out[i] = best
    return out


def instance_quality(c: float, iou: float, eta: float = 1.0, mode: str = "both") -> tuple[float, float]:
    """phi = c * iou**eta and the loss weight exp(phi).

    ``mode`` picks which index enters: ``cls`` fixes iou = 1, ``iou`` fixes
    c = 1, ``none`` disables the weighting (phi = 0).
    """
    if mode not in ALT_MODES:
        raise ValueError(f"unknown quality mode {mode!r}")
    if mode == "none":
        return 0.0, 1.0
    if mode == "cls":
        iou = 1.0
    elif mode == "iou":
        c = 1.0
    phi = c * iou**eta
    return phi, math.exp(phi)


def focal_cls_loss(pred_scores, target_class: int, gamma_f: float = 2.0) -> Var:
    """Sigmoid focal loss over the class vector, averaged over classes."""
    p = gc.clip(gc.as_var(pred_scores), P_CLAMP, 1.0 - P_CLAMP)
    onehot = np.zeros(p.shape)
    onehot[target_class] = 1.0
    pos = gc.power(1.0 - p, gamma_f) * gc.log(p) * onehot
    neg = gc.power(p, gamma_f) * gc.log(1.0 - p) * (1.0 - onehot)
    return gc.mean(pos + neg) * -1.0


def box_vector(b: BevBox, d_max: float = 8.0) -> np.ndarray:
    """(cx / d_max, cy / d_max, log length, log width)."""
    return np.array([b.cx / d_max, b.cy / d_max, math.log(b.length), math.log(b.width)])


def l1_loc_loss(b, b_star, d_max: float = 8.0):
    """Mean absolute error over normalized centers and log sizes. Boxes give
    a float; a Var holding ``box_vector`` coordinates gives a Var."""
    target = box_vector(b_star, d_max) if isinstance(b_star, BevBox) else np.asarray(b_star)
    if isinstance(b, BevBox):
        return float(np.mean(np.abs(box_vector(b, d_max) - target)))
    return gc.mean(gc.vabs(gc.sub(b, target)))


@dataclass
class MatchedTerm:
    """One matched instance: its class-score and box-vector Vars, target and
    (detached) weight."""

    scores: Var
    box: Var
    target: BevBox
    weight: float = 1.0


@dataclass
class LossBreakdown:
    cls: Var | float = 0.0
    loc: Var | float = 0.0
    heat: Var | float = 0.0
    specialty: Var | float = 0.0
    tda: Var | float = 0.0
    total: Var | float = 0.0
    extras: dict = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        def f(v):
            return float(np.asarray(getattr(v, "value", v)))

        return {k: f(getattr(self, k)) for k in ("cls", "loc", "heat", "specialty", "tda", "total")}


def total_loss(matched: Sequence[MatchedTerm], pred_heatmap, gt_heatmap, specialty_term=0.0,
               tda_term=0.0, coeffs: LossCoeffs = LossCoeffs(), d_max: float = 8.0,
               gamma_f: float = 2.0) -> tuple[Var, LossBreakdown]:
    """sum_q [alpha w_q L_cls + beta w_q L_loc] + gamma L_heat + L_s + L_tda."""
    heat = gaussian_focal_loss(pred_heatmap, gt_heatmap)
    tape = heat.tape
    cls: Var | float = 0.0
    loc: Var | float = 0.0
    for m in matched:
        cls = cls + focal_cls_loss(m.scores, m.target.class_id, gamma_f) * m.weight
        loc = loc + l1_loc_loss(m.box, m.target, d_max) * m.weight
    cls = gc.as_var(cls, tape) * coeffs.alpha
    loc = gc.as_var(loc, tape) * coeffs.beta
    heat_w = heat * coeffs.gamma
    total = cls + loc + heat_w + specialty_term + tda_term
    return total, LossBreakdown(cls, loc, heat_w, specialty_term, tda_term, total)
