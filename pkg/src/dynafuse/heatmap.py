"""Center heatmaps and the penalty-reduced Gaussian focal loss."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grid_core as gc
from .boxes import BevBox
from .grid_core import FeatureGrid, GridSpec, Var

log = logging.getLogger(__name__)

MIN_OVERLAP = 0.1
SIGMA_MIN = 0.8
P_MIN = 1e-4


class Heatmap(FeatureGrid):
    """K x H x W grid with every value in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("heatmap values must lie in [0, 1]")

    @property
    def classes(self) -> int:
        return self.channels


def gaussian_radius(box_l: float, box_w: float, spec: GridSpec, min_overlap: float = MIN_OVERLAP,
                    sigma_min: float = SIGMA_MIN) -> float:
    """Kernel sigma (in cells) for a box of the given metric size.

    The radius is the smallest of the three corner-shift tolerances of the
    CenterNet rule (shifted, shrunk, grown box) that still keeps
    IoU >= ``min_overlap``; sigma is a third of it, floored at ``sigma_min``.
    """
    if not (box_l > 0 and box_w > 0):
        raise ValueError("box dimensions must be positive")
    if not 0 < min_overlap < 1:
        raise ValueError("min_overlap must lie in (0, 1)")
    h = box_l / spec.cell_size
    w = box_w / spec.cell_size
    o = min_overlap

    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2

    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4 * o
    b3 = -2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)

    return max(sigma_min, min(r1, r2, r3) / 3.0)


def gaussian_blob(spec: GridSpec, cx: float, cy: float, sigma: float) -> np.ndarray:
    """exp(-d^2 / 2 sigma^2) over the grid, d measured in cells from each cell
    center to (cx, cy); the cell holding the center is set to exactly 1."""
    gx, gy = spec.cell_centers()
    d2 = ((gx - cx) ** 2 + (gy - cy) ** 2) / spec.cell_size**2
    blob = np.exp(-d2 / (2.0 * sigma * sigma))
    if spec.contains(cx, cy):
        row, col = spec.cell_of(cx, cy)
        blob[row, col] = 1.0
    return blob


def render_gt_heatmap(boxes: Sequence[BevBox], spec: GridSpec, classes: int,
                      min_overlap: float = MIN_OVERLAP, sigma_min: float = SIGMA_MIN) -> Heatmap:
    if classes < 1:
        raise ValueError("need at least one class")
    hm = np.zeros((classes, spec.height, spec.width))
    skipped = 0
    for box in boxes:
        if not spec.contains(box.cx, box.cy) or not 0 <= box.class_id < classes:
            skipped += 1
            continue
        sigma = gaussian_radius(box.length, box.width, spec, min_overlap, sigma_min)
        np.maximum(hm[box.class_id], gaussian_blob(spec, box.cx, box.cy, sigma), out=hm[box.class_id])
    if skipped:
        log.warning("render_gt_heatmap skipped %d out-of-range boxes", skipped)
    return Heatmap(hm)


def gaussian_focal_loss(pred, target) -> Var:
    """CenterNet focal loss, normalized by the number of exact-1 targets.

    ``pred`` may be a Var (differentiable) or array-like; ``target`` is
    treated as a constant.
    """
    pred = gc.as_var(pred)
    tv = np.asarray(target.data if isinstance(target, FeatureGrid) else getattr(target, "value", target),
                    dtype=np.float64)
    if pred.shape != tv.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {tv.shape}")
    pos = tv == 1.0
    n_pos = max(1, int(pos.sum()))
    p = gc.clip(pred, P_MIN, 1.0 - P_MIN)
    one_minus = 1.0 - p
    pos_term = gc.square(one_minus) * gc.log(p) * pos
    neg_w = np.where(pos, 0.0, (1.0 - tv) ** 4)
    neg_term = gc.square(p) * gc.log(one_minus) * neg_w
    return (gc.vsum(pos_term) + gc.vsum(neg_term)) * (-1.0 / n_pos)


def to_pgm(channel: np.ndarray, path, normalize: bool = False) -> None:
    """Binary PGM (P5) of a 2-D map; values in [0, 1] scale to 0..255."""
    a = np.asarray(channel, dtype=np.float64)
    if normalize:
        lo, hi = float(a.min()), float(a.max())
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    img = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img[::-1].tobytes())


def export_heatmap_pgm(hm: FeatureGrid, prefix, normalize: bool = False) -> list[Path]:
    """One PGM per class channel: ``<prefix>_c<k>.pgm``."""
    prefix = Path(prefix)
    paths = []
    for k in range(hm.channels):
        p = prefix.with_name(f"{prefix.name}_c{k}.pgm")
        to_pgm(hm.data[k], p, normalize)
        paths.append(p)
    return paths
