"""Center-distance average precision and the toy mAP."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import BevBox

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
RECALL_POINTS = 40


def _box(p) -> BevBox:
    return p.box if hasattr(p, "box") else p


def _greedy_tp(preds_by_scene: Mapping, gts_by_scene: Mapping, class_id: int, dist_thresh: float):
    """Pool every scene's class predictions, walk them by descending score
    and mark each TP/FP. Returns (scores, tp flags, number of GT)."""
    items = []
    for key in preds_by_scene:
        for i, p in enumerate(preds_by_scene[key]):
            b = _box(p)
            if b.class_id == class_id:
                items.append((-(b.score or 0.0), key, i, b))
    # stable: score desc, then scene insertion order and prediction order
    order = {k: n for n, k in enumerate(preds_by_scene)}
    items.sort(key=lambda t: (t[0], order[t[1]], t[2]))
    claimed = {k: set() for k in gts_by_scene}
    n_gt = sum(1 for k in gts_by_scene for g in gts_by_scene[k] if g.class_id == class_id)
    scores, tp = [], []
    for neg_s, key, _, b in items:
        best, best_d = None, None
        for j, g in enumerate(gts_by_scene[key]):
            if g.class_id != class_id or j in claimed[key]:
                continue
            d = math.hypot(g.cx - b.cx, g.cy - b.cy)
            if d <= dist_thresh and (best_d is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            claimed[key].add(best)
        scores.append(-neg_s)
        tp.append(best is not None)
    return np.array(scores), np.array(tp, dtype=bool), n_gt


def ap_from_flags(tp: np.ndarray, n_gt: int, recall_points: int = RECALL_POINTS) -> float | None:
    """Interpolated AP over ``recall_points`` evenly spaced recall levels,
    using the monotone (right-max) precision envelope."""
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.arange(1, recall_points + 1) / recall_points
    total = 0.0
    for r in levels:
        # small slack so that exact recalls like 1/3 * 3 are not missed
        idx = np.flatnonzero(recall >= r - 1e-12)
        total += envelope[idx[0]] if idx.size else 0.0
    return float(total / recall_points)


def average_precision(preds: Sequence, gts: Sequence[BevBox], class_id: int, dist_thresh: float) -> float | None:
    """AP of one class at one centre-distance threshold; None if the class
    has no ground truth."""
    if dist_thresh <= 0:
        raise ValueError("dist_thresh must be positive")
    _, tp, n_gt = _greedy_tp({0: list(preds)}, {0: list(gts)}, class_id, dist_thresh)
    return ap_from_flags(tp, n_gt)


@dataclass
class EvalResult:
    classes: int
    thresholds: tuple[float, ...] = THRESHOLDS
    ap: dict = field(default_factory=dict)  # (class, thr) -> AP or None
    counts: dict = field(default_factory=dict)  # (class, thr) -> (tp, fp, fn)

    @property
    def defined(self) -> list[float]:
        return [v for v in self.ap.values() if v is not None]

    @property
    def mAP(self) -> float:
        d = self.defined
        return float(np.mean(d)) if d else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class," + ",".join(f"AP@{t:g}m" for t in self.thresholds) + ",mean\n")

        def fmt(v):
            return "nan" if v is None else f"{v:.6f}"

        for k in range(self.classes):
            row = [self.ap.get((k, t)) for t in self.thresholds]
            vals = [v for v in row if v is not None]
            buf.write(f"{k}," + ",".join(fmt(v) for v in row) + f",{fmt(np.mean(vals) if vals else None)}\n")
        col_means = []
        for t in self.thresholds:
            vals = [self.ap[(k, t)] for k in range(self.classes) if self.ap.get((k, t)) is not None]
            col_means.append(float(np.mean(vals)) if vals else None)
        buf.write("mAP," + ",".join(fmt(v) for v in col_means) + f",{self.mAP:.6f}\n")
        return buf.getvalue()


def toy_map(preds_by_scene: Mapping, gts_by_scene: Mapping, classes: int | None = None,
            thresholds: Sequence[float] = THRESHOLDS) -> EvalResult:
    if set(preds_by_scene) != set(gts_by_scene):
        raise ValueError("prediction and ground-truth scene keys differ")
    if classes is None:
        ids = [g.class_id for v in gts_by_scene.values() for g in v]
        ids += [_box(p).class_id for v in preds_by_scene.values() for p in v]
        classes = max(ids) + 1 if ids else 1
    res = EvalResult(classes, tuple(thresholds))
    for k in range(classes):
        for t in thresholds:
            _, tp, n_gt = _greedy_tp(preds_by_scene, gts_by_scene, k, t)
            res.ap[(k, t)] = ap_from_flags(tp, n_gt)
            n_tp = int(tp.sum())
            res.counts[(k, t)] = (n_tp, int(tp.size - n_tp), n_gt - n_tp)
    return res
