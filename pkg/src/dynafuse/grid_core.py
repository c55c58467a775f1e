"""Feature grids, bilinear sampling and a small reverse-mode tape.

Everything is float64. The tape only knows the handful of operations the
fusion pipeline needs; it is not meant as a general autodiff library.
"""
from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Plain data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Immutable C x H x W grid of finite float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=DTYPE, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"FeatureGrid needs a non-empty (C, H, W) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("FeatureGrid values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "data": self.data.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureGrid":
        shape = (int(d["channels"]), int(d["height"]), int(d["width"]))
        data = np.asarray(d["data"], dtype=DTYPE)
        if data.size != math.prod(shape):
            raise ValueError(f"data length {data.size} does not match shape {shape}")
        return cls(data.reshape(shape))


def grid_new(c: int, h: int, w: int, fill: float = 0.0) -> FeatureGrid:
    if min(c, h, w) < 1:
        raise ValueError(f"grid dimensions must be >= 1, got ({c}, {h}, {w})")
    if not math.isfinite(fill):
        raise ValueError("fill must be finite")
    return FeatureGrid(np.full((c, h, w), fill, dtype=DTYPE))


def save_grid(grid: FeatureGrid, path) -> None:
    """Write ``.json`` (structured text) or ``.npy`` (flat binary) by suffix."""
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.ascontiguousarray(grid.data))
    else:
        path.write_text(json.dumps(grid.to_dict()))


def load_grid(path) -> FeatureGrid:
    path = Path(path)
    if path.suffix == ".npy":
        return FeatureGrid(np.load(path))
    return FeatureGrid.from_dict(json.loads(path.read_text()))


@dataclass(frozen=True)
class GridSpec:
    """Metric extent of a BEV grid. Cell (row, col) covers
    [x_min + col*cell, x_min + (col+1)*cell) along x, same for y/rows."""

    x_min: float = -20.0
    x_max: float = 20.0
    y_min: float = -20.0
    y_max: float = 20.0
    cell_size: float = 0.5

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("GridSpec needs x_max > x_min and y_max > y_min")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    @property
    def width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size))

    @property
    def height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_size))

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def world_to_cell(self, x, y):
        """Continuous cell coordinates; cell centers sit at integer + 0.5."""
        return (np.asarray(x) - self.x_min) / self.cell_size, (np.asarray(y) - self.y_min) / self.cell_size

    def cell_to_world(self, cx, cy):
        return self.x_min + np.asarray(cx) * self.cell_size, self.y_min + np.asarray(cy) * self.cell_size

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the cell containing a world point."""
        cx, cy = self.world_to_cell(x, y)
        col = min(int(math.floor(cx)), self.width - 1)
        row = min(int(math.floor(cy)), self.height - 1)
        return row, col

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every cell center, each shaped (H, W)."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return gx, gy


# ---------------------------------------------------------------------------
# Bilinear sampling kernels (zero padding per corner)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _bilinear_fwd(vals, xs, ys):
    # vals is channel-last: (B, H, W, C)
    B, H, W, C = vals.shape
    P = xs.shape[1]
    out = np.zeros((B, P, C))
    for b in range(B):
        for p in range(P):
            x = xs[b, p]
            y = ys[b, p]
            if not (x > -1.0 and x < W and y > -1.0 and y < H):
                continue
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            fx = x - x0
            fy = y - y0
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi > H - 1:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xi = x0 + dx
                    if xi < 0 or xi > W - 1:
                        continue
                    wgt = wy * (fx if dx == 1 else 1.0 - fx)
                    for c in range(C):
                        out[b, p, c] += wgt * vals[b, yi, xi, c]
    return out


@njit(cache=True)
def _bilinear_bwd(vals, xs, ys, gout, need_vals, need_xy):
    B, H, W, C = vals.shape
    P = xs.shape[1]
    gvals = np.zeros(vals.shape) if need_vals else np.zeros((1, 1, 1, 1))
    gx = np.zeros(xs.shape)
    gy = np.zeros(ys.shape)
    for b in range(B):
        for p in range(P):
            x = xs[b, p]
            y = ys[b, p]
            if not (x > -1.0 and x < W and y > -1.0 and y < H):
                continue
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            fx = x - x0
            fy = y - y0
            for dy in range(2):
                yi = y0 + dy
                if yi < 0 or yi > H - 1:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                dwy = 1.0 if dy == 1 else -1.0
                for dx in range(2):
                    xi = x0 + dx
                    if xi < 0 or xi > W - 1:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    dwx = 1.0 if dx == 1 else -1.0
                    acc = 0.0
                    for c in range(C):
                        g = gout[b, p, c]
                        if need_vals:
                            gvals[b, yi, xi, c] += wx * wy * g
                        acc += g * vals[b, yi, xi, c]
                    if need_xy:
                        gx[b, p] += dwx * wy * acc
                        gy[b, p] += wx * dwy * acc
    return gvals, gx, gy


@njit(cache=True)
def _deform_fwd(vals, xs, ys, attn):
    # vals (M, H, W, D) channel-last; xs, ys, attn (M, K, Hq, Wq)
    M, H, W, D = vals.shape
    _, K, Hq, Wq = xs.shape
    out = np.zeros((M, Hq, Wq, D))
    for m in range(M):
        for k in range(K):
            for i in range(Hq):
                for j in range(Wq):
                    x = xs[m, k, i, j]
                    y = ys[m, k, i, j]
                    if not (x > -1.0 and x < W and y > -1.0 and y < H):
                        continue
                    a = attn[m, k, i, j]
                    x0 = int(math.floor(x))
                    y0 = int(math.floor(y))
                    fx = x - x0
                    fy = y - y0
                    for dy in range(2):
                        yi = y0 + dy
                        if yi < 0 or yi > H - 1:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        for dx in range(2):
                            xi = x0 + dx
                            if xi < 0 or xi > W - 1:
                                continue
                            wgt = a * wy * (fx if dx == 1 else 1.0 - fx)
                            for d in range(D):
                                out[m, i, j, d] += wgt * vals[m, yi, xi, d]
    return out


@njit(cache=True)
def _deform_bwd(vals, xs, ys, attn, gout):
    M, H, W, D = vals.shape
    _, K, Hq, Wq = xs.shape
    gvals = np.zeros(vals.shape)
    gx = np.zeros(xs.shape)
    gy = np.zeros(xs.shape)
    ga = np.zeros(xs.shape)
    for m in range(M):
        for k in range(K):
            for i in range(Hq):
                for j in range(Wq):
                    x = xs[m, k, i, j]
                    y = ys[m, k, i, j]
                    if not (x > -1.0 and x < W and y > -1.0 and y < H):
                        continue
                    a = attn[m, k, i, j]
                    x0 = int(math.floor(x))
                    y0 = int(math.floor(y))
                    fx = x - x0
                    fy = y - y0
                    for dy in range(2):
                        yi = y0 + dy
                        if yi < 0 or yi > H - 1:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        dwy = 1.0 if dy == 1 else -1.0
                        for dx in range(2):
                            xi = x0 + dx
                            if xi < 0 or xi > W - 1:
                                continue
                            wx = fx if dx == 1 else 1.0 - fx
                            dwx = 1.0 if dx == 1 else -1.0
                            acc = 0.0
                            for d in range(D):
                                g = gout[m, i, j, d]
                                gvals[m, yi, xi, d] += a * wx * wy * g
                                acc += g * vals[m, yi, xi, d]
                            ga[m, k, i, j] += wx * wy * acc
                            gx[m, k, i, j] += a * dwx * wy * acc
                            gy[m, k, i, j] += a * wx * dwy * acc
    return gvals, gx, gy, ga


def bilinear_sample(g: FeatureGrid, x: float, y: float) -> np.ndarray:
    """Sample every channel of ``g`` at cell coordinate (x=col, y=row)."""
    vals = np.asarray(g.data if isinstance(g, FeatureGrid) else g, dtype=DTYPE)
    vals = np.ascontiguousarray(vals.transpose(1, 2, 0))[None]
    out = _bilinear_fwd(vals, np.array([[float(x)]]), np.array([[float(y)]]))
    return out[0, 0]


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    """A value recorded on a tape. Supports the arithmetic operators."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "name", "requires_grad")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), vjp=None, name=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Var{tag} #{self.index} shape={self.shape}>"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of operations. Nodes are appended in evaluation order,
    so the list is already topologically sorted."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None, requires_grad=True) -> Var:
        return Var(self, np.array(value, dtype=DTYPE), name=name, requires_grad=requires_grad)

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=DTYPE))

    def record(self, value, parents: Sequence[Var], vjp) -> Var:
        rg = any(p.requires_grad for p in parents)
        return Var(self, value, tuple(parents), vjp if rg else None, requires_grad=rg)

    def release(self) -> None:
        """Drop the graph. Nodes point back at the tape, so without this a
        finished tape only goes away at the next full cyclic collection,
        which with few but large arrays can be gigabytes later."""
        for n in self.nodes:
            n.parents, n.vjp = (), None
        self.nodes.clear()


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from ``loss``. Returns gradients of every named leaf."""
    if loss.tape is not tape:
        raise ValueError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None)
        if node.vjp is None:
            if node.name is not None and node.requires_grad:
                out[node.name] = g if g is not None else np.zeros_like(node.value)
            continue
        if g is None:
            continue
        pgrads = node.vjp(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.index in grads:
                grads[p.index] = grads[p.index] + pg
            else:
                grads[p.index] = pg
    return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
        if isinstance(x, (list, tuple)):
            for y in x:
                if isinstance(y, Var):
                    return y.tape
    return Tape()


def as_var(x, tape: Tape | None = None) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, FeatureGrid):
        x = x.data
    return (tape if tape is not None else Tape()).const(x)


def _lift(*xs):
    tape = _tape_of(*xs)
    return tape, [as_var(x, tape) for x in xs]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


def add(a, b) -> Var:
    tape, (a, b) = _lift(a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape, (a, b) = _lift(a, b)
    sa, sb = a.shape, b.shape
    return tape.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    tape, (a, b) = _lift(a, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b) -> Var:
    tape, (a, b) = _lift(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def exp(x) -> Var:
    tape, (x,) = _lift(x)
    out = np.exp(x.value)
    return tape.record(out, (x,), lambda g: (g * out,))


def log(x) -> Var:
    tape, (x,) = _lift(x)
    xv = x.value
    return tape.record(np.log(xv), (x,), lambda g: (g / xv,))


def square(x) -> Var:
    tape, (x,) = _lift(x)
    xv = x.value
    return tape.record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def power(x, k: float) -> Var:
    tape, (x,) = _lift(x)
    xv = x.value
    return tape.record(xv**k, (x,), lambda g: (g * k * xv ** (k - 1),))


# Piecewise ops report which branch they took while a recorder is active, so
# a finite-difference probe can tell whether it crossed a kink.
_BRANCHES: list | None = None


@contextmanager
def record_branches():
    global _BRANCHES
    prev, _BRANCHES = _BRANCHES, []
    try:
        yield _BRANCHES
    finally:
        _BRANCHES = prev


def _note(*arrays) -> None:
    if _BRANCHES is not None:
        _BRANCHES.extend(np.asarray(a).tobytes() for a in arrays)


def vabs(x) -> Var:
    tape, (x,) = _lift(x)
    xv = x.value
    _note(xv > 0)
    return tape.record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def relu(x) -> Var:
    tape, (x,) = _lift(x)
    mask = x.value > 0
    _note(mask)
    return tape.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Var:
    tape, (x,) = _lift(x)
    out = np.tanh(x.value)
    return tape.record(out, (x,), lambda g: (g * (1.0 - out * out),))


def _np_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Var:
    tape, (x,) = _lift(x)
    out = _np_sigmoid(x.value)
    return tape.record(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Var:
    tape, (x,) = _lift(x)
    xv = x.value
    out = np.logaddexp(0.0, xv)
    s = _np_sigmoid(xv)
    return tape.record(out, (x,), lambda g: (g * s,))


def clip(x, lo: float, hi: float) -> Var:
    """Clamp; gradient is zero wherever the clamp is active."""
    tape, (x,) = _lift(x)
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    _note(xv < lo, xv > hi)
    return tape.record(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def vsum(x, axis=None, keepdims=False) -> Var:
    tape, (x,) = _lift(x)
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return tape.record(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(vsum(x, axis, keepdims), 1.0 / n)


def vmax(x) -> Var:
    """Global maximum; the gradient flows to the first arg-max."""
    tape, (x,) = _lift(x)
    flat = int(np.argmax(x.value))
    shape = x.shape
    _note(flat)

    def vjp(g):
        out = np.zeros(shape)
        out.flat[flat] = g
        return (out,)

    return tape.record(np.asarray(x.value.flat[flat]), (x,), vjp)


def softmax(x, axis=-1) -> Var:
    tape, (x,) = _lift(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return tape.record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def reshape(x, shape) -> Var:
    tape, (x,) = _lift(x)
    old = x.shape
    return tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast(x, shape) -> Var:
    tape, (x,) = _lift(x)
    old = x.shape
    return tape.record(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def getitem(x, key) -> Var:
    tape, (x,) = _lift(x)
    shape = x.shape
    keys = key if isinstance(key, tuple) else (key,)
    basic = all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in keys)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return tape.record(np.array(x.value[key]), (x,), vjp)


def concat(xs: Sequence, axis=0) -> Var:
    tape = _tape_of(xs)
    xs = [as_var(x, tape) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tape.record(
        np.concatenate([x.value for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def einsum(spec: str, a, b) -> Var:
    """Two-operand einsum without repeated indices inside one operand."""
    tape, (a, b) = _lift(a, b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    av, bv = a.value, b.value
    val = np.einsum(spec, av, bv, optimize=True)

    def vjp(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, av, optimize=True) if b.requires_grad else None
        return ga, gb

    return tape.record(val, (a, b), vjp)


@njit(cache=True)
def _conv_fwd(xp, w, H, W):
    O, I, k, _ = w.shape
    out = np.zeros((O, H, W))
    for o in range(O):
        for i in range(I):
            for dy in range(k):
                for dx in range(k):
                    wv = w[o, i, dy, dx]
                    for y in range(H):
                        for x in range(W):
                            out[o, y, x] += wv * xp[i, y + dy, x + dx]
    return out


@njit(cache=True, fastmath=True)
def _conv_bwd(xp, w, g, need_x):
    O, H, W = g.shape
    gw = np.zeros(w.shape)
    gxp = np.zeros(xp.shape)
    _, I, k, _ = w.shape
    for o in range(O):
        for i in range(I):
            for dy in range(k):
                for dx in range(k):
                    wv = w[o, i, dy, dx]
                    acc = 0.0
                    for y in range(H):
                        for x in range(W):
                            gv = g[o, y, x]
                            acc += gv * xp[i, y + dy, x + dx]
                            if need_x:
                                gxp[i, y + dy, x + dx] += wv * gv
                    gw[o, i, dy, dx] = acc
    return gxp, gw


def conv2d(x, w, b=None) -> Var:
    """Same-padded, stride-1 convolution of a (I, H, W) input with an
    (O, I, k, k) kernel, k odd."""
    tape, (x, w) = _lift(x, w)
    xv, wv = x.value, w.value
    O, I, k, k2 = wv.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if xv.ndim != 3 or xv.shape[0] != I:
        raise ValueError(f"conv2d channel mismatch: input {xv.shape}, kernel {wv.shape}")
    _, H, W = xv.shape
    p = k // 2
    xp = np.pad(xv, ((0, 0), (p, p), (p, p)))
    wc = np.ascontiguousarray(wv)
    out = _conv_fwd(xp, wc, H, W)

    def vjp(g):
        gxp, gw = _conv_bwd(xp, wc, np.ascontiguousarray(g), x.requires_grad)
        gx = gxp[:, p : p + H, p : p + W] if x.requires_grad else None
        return gx, (gw if w.requires_grad else None)

    res = tape.record(out, (x, w), vjp)
    if b is not None:
        res = add(res, reshape(as_var(b, tape), (O, 1, 1)))
    return res


def conv1x1(x, w, b=None) -> Var:
    """Pointwise channel mixing: (O, I) weights applied to (I, ...) input."""
    out = _pointwise(x, w)
    if b is not None:
        bv = as_var(b, out.tape)
        out = add(out, reshape(bv, (bv.shape[0],) + (1,) * (out.ndim - 1)))
    return out


def _pointwise(x, w) -> Var:
    tape, (x, w) = _lift(x, w)
    xv, wv = x.value, w.value
    if xv.shape[0] != wv.shape[1]:
        raise ValueError(f"channel mismatch: input {xv.shape}, weights {wv.shape}")
    rest = xv.shape[1:]
    xm = xv.reshape(xv.shape[0], -1)
    out = (wv @ xm).reshape((wv.shape[0],) + rest)

    def vjp(g):
        gm = g.reshape(wv.shape[0], -1)
        gx = (wv.T @ gm).reshape(xv.shape) if x.requires_grad else None
        gw = gm @ xm.T if w.requires_grad else None
        return gx, gw

    return tape.record(out, (x, w), vjp)


def sample(vals, xs, ys) -> Var:
    """Bilinear lookup of (B, C, H, W) values at (B, P) cell coordinates,
    zero padding outside the grid. Returns (B, C, P)."""
    tape, (vals, xs, ys) = _lift(vals, xs, ys)
    v = np.ascontiguousarray(vals.value.transpose(0, 2, 3, 1))
    xv = np.ascontiguousarray(xs.value, dtype=DTYPE)
    yv = np.ascontiguousarray(ys.value, dtype=DTYPE)
    _note(np.floor(xv), np.floor(yv))
    out = _bilinear_fwd(v, xv, yv).transpose(0, 2, 1)

    def vjp(g):
        need_xy = xs.requires_grad or ys.requires_grad
        gl = np.ascontiguousarray(g.transpose(0, 2, 1))
        gv, gx, gy = _bilinear_bwd(v, xv, yv, gl, vals.requires_grad, need_xy)
        gv = gv.transpose(0, 3, 1, 2) if vals.requires_grad else None
        return (gv, gx if need_xy else None, gy if need_xy else None)

    return tape.record(out, (vals, xs, ys), vjp)


def deform_sum(vals, xs, ys, attn) -> Var:
    """sum_k attn[m,k] * bilinear(vals[m], xs[m,k], ys[m,k]) for (M, D, H, W)
    values and (M, K, Hq, Wq) sampling positions/weights. Returns
    (M, D, Hq, Wq). Same result as ``sample`` followed by a weighted sum,
    without materializing the per-point samples."""
    tape, (vals, xs, ys, attn) = _lift(vals, xs, ys, attn)
    if xs.shape != ys.shape or xs.shape != attn.shape or xs.shape[0] != vals.shape[0]:
        raise ValueError(f"deform_sum shape mismatch: vals {vals.shape}, points {xs.shape}, attn {attn.shape}")
    v = np.ascontiguousarray(vals.value.transpose(0, 2, 3, 1))
    xv = np.ascontiguousarray(xs.value, dtype=DTYPE)
    yv = np.ascontiguousarray(ys.value, dtype=DTYPE)
    av = np.ascontiguousarray(attn.value, dtype=DTYPE)
    _note(np.floor(xv), np.floor(yv))
    out = _deform_fwd(v, xv, yv, av).transpose(0, 3, 1, 2)

    def vjp(g):
        gv, gx, gy, ga = _deform_bwd(v, xv, yv, av, np.ascontiguousarray(g.transpose(0, 2, 3, 1)))
        return gv.transpose(0, 3, 1, 2), gx, gy, ga

    return tape.record(out, (vals, xs, ys, attn), vjp)


def stop_gradient(x) -> Var:
    x = as_var(x)
    return x.tape.const(x.value)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def numeric_grad(f: Callable[[dict], float], at: dict[str, np.ndarray], eps: float, coords=None):
    """Central differences of a scalar function of named arrays.

    ``coords`` optionally restricts the probe to a list of (name, flat index).
    """
    at = {k: np.array(v, dtype=DTYPE) for k, v in at.items()}
    if coords is None:
        coords = [(k, i) for k, v in at.items() for i in range(v.size)]
    out = {}
    for name, i in coords:
        arr = at[name]
        old = arr.flat[i]
        arr.flat[i] = old + eps
        fp = float(f(at))
        arr.flat[i] = old - eps
        fm = float(f(at))
        arr.flat[i] = old
        out[(name, i)] = (fp - fm) / (2 * eps)
    return out


def grad_check(f: Callable, at, eps: float = 1e-4, coords=None) -> float:
    """Max over probed coordinates of |analytic - central| / max(1, |analytic|).

    ``f`` maps a dict of leaf Vars (or a single Var if ``at`` is an array) to
    a scalar Var.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = not isinstance(at, dict)
    params = {"x": np.asarray(at, dtype=DTYPE)} if single else dict(at)

    def run(values, with_grad):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in values.items()}
        loss = f(leaves["x"] if single else leaves)
        if with_grad:
            return backward(tape, loss)
        return float(np.asarray(loss.value))

    analytic = run(params, True)
    numeric = numeric_grad(lambda v: run(v, False), params, eps, coords)
    worst = 0.0
    for (name, i), num in numeric.items():
        a = analytic[name].flat[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def iter_leaves(tape: Tape) -> Iterable[Var]:
    return (n for n in tape.nodes if n.vjp is None and n.requires_grad)
