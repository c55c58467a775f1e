"""PGM map dumps and a small SVG line chart, no imaging dependency."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .heatmap import to_pgm

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def read_loss_csv(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    cols = [c for c in rows[0] if c not in ("step", "matched", "grad_norm")]
    return {c: [float(r[c]) for r in rows] for c in cols}


def svg_lines(series: Mapping[str, Sequence[float]], path, title: str = "", log_y: bool = True,
              width: int = 640, height: int = 360) -> Path:
    """One polyline per series against its index. Non-positive values are
    dropped from a log axis."""
    pad_l, pad_r, pad_t, pad_b = 60, 120, 30, 40
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    tf = (lambda v: np.log10(v)) if log_y else (lambda v: v)
    pts = {}
    for name, ys in series.items():
        ys = np.asarray(ys, dtype=float)
        keep = np.isfinite(ys) & ((ys > 0) if log_y else True)
        if keep.any():
            pts[name] = (np.flatnonzero(keep), tf(ys[keep]))
    n = max((len(s) for s in series.values()), default=1)
    lo = min((v.min() for _, v in pts.values()), default=0.0)
    hi = max((v.max() for _, v in pts.values()), default=1.0)
    if hi <= lo:
        hi = lo + 1.0

    def sx(i):
        return pad_l + pw * i / max(1, n - 1)

    def sy(v):
        return pad_t + ph * (1.0 - (v - lo) / (hi - lo))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{pad_l}" y="18" font-size="13">{title}</text>',
           f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">step</text>']
    for t in np.linspace(lo, hi, 5):
        label = f"{10 ** t:.3g}" if log_y else f"{t:.3g}"
        out.append(f'<text x="{pad_l - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{label}</text>')
    for j, (name, (xs, ys)) in enumerate(pts.items()):
        color = _COLORS[j % len(_COLORS)]
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{poly}"/>')
        ly = pad_t + 14 * j + 10
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 32}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def dump_maps(maps: Mapping[str, np.ndarray], out_dir) -> list[Path]:
    """Write each map as PGM. 3-D maps give one file per channel, except
    ``fused`` which is reduced to its channel mean. Maps already in [0, 1]
    are written as is, anything else is min-max stretched."""
    out_dir = Path(out_dir)
    paths = []
    for name, arr in maps.items():
        a = np.asarray(arr, dtype=float)
        if name == "fused":
            a = a.mean(axis=0)
        planes = [(name, a)] if a.ndim == 2 else [(f"{name}_c{k}", a[k]) for k in range(a.shape[0])]
        for fname, plane in planes:
            stretch = plane.min() < 0 or plane.max() > 1
            p = out_dir / f"{fname}.pgm"
            to_pgm(plane, p, normalize=stretch)
            paths.append(p)
    return paths
