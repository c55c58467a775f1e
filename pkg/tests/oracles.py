"""Brute-force reference implementations the fast code is compared with."""
import math

import numpy as np

from dynafuse.heatmap import P_MIN


def naive_bilinear(vals, x, y):
    """Zero-padded bilinear lookup, one corner at a time."""
    C, H, W = vals.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(C)
    for yi, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xi, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yi < H and 0 <= xi < W:
                out += wx * wy * vals[:, yi, xi]
    return out


def loop_focal_loss(pred, target):
    """Cell-by-cell penalty-reduced focal loss."""
    total, n_pos = 0.0, 0
    for idx in np.ndindex(target.shape):
        p = min(max(pred[idx], P_MIN), 1 - P_MIN)
        if target[idx] == 1.0:
            total += (1 - p) ** 2 * math.log(p)
            n_pos += 1
        else:
            total += (1 - target[idx]) ** 4 * p**2 * math.log(1 - p)
    return -total / max(n_pos, 1)


def _bisect(f, lo, hi):
    # f decreasing in r, find the r where f(r) = 0
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if f(mid) > 0 else (lo, mid)
    return (lo + hi) / 2


def radius_by_bisection(h, w, o):
    """Largest corner shift keeping IoU >= o, for each of the three ways the
    corners can move, found numerically from the IoU itself."""
    def shifted(r):
        inter = (h - r) * (w - r)
        return inter / (2 * h * w - inter) - o

    def shrunk(r):
        return (h - 2 * r) * (w - 2 * r) / (h * w) - o

    def grown(r):
        return h * w / ((h + 2 * r) * (w + 2 * r)) - o

    m = min(h, w)
    return min(_bisect(shifted, 0, m), _bisect(shrunk, 0, m / 2), _bisect(grown, 0, 10 * (h + w)))


def loop_deformable(query, value, p, prefix):
    """sum_m W_m [ sum_k A_mqk W'_m x(p_q + dp_mqk) ], one query at a time."""
    Wv, Wo = p[prefix + "value_w"], p[prefix + "out_w"]
    M = Wv.shape[0]
    K = p[prefix + "attn_w"].shape[0] // M
    C, H, W = query.shape
    out = np.zeros((Wo.shape[1], H, W))
    for i in range(H):
        for j in range(W):
            z = query[:, i, j]
            off = (p[prefix + "off_w"] @ z + p[prefix + "off_b"]).reshape(M, K, 2)
            logit = (p[prefix + "attn_w"] @ z + p[prefix + "attn_b"]).reshape(M, K)
            for m in range(M):
                a = np.exp(logit[m] - logit[m].max())
                a /= a.sum()
                acc = np.zeros(Wv.shape[1])
                for k in range(K):
                    x = naive_bilinear(value, j + off[m, k, 0], i + off[m, k, 1])
                    acc += a[k] * (Wv[m] @ x)
                out[:, i, j] += Wo[m] @ acc
    return out
