"""Finite-difference checks for every differentiable op and the composed
pipeline.

Each check builds a scalar function of a few random arrays at a fixed seed
and compares reverse-mode gradients with central differences. Inputs are
kept away from kinks (relu/abs at 0, clip bounds, bilinear cell edges) so
the comparison is meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import grid_core as gc
from .adaptive_head import LossCoeffs, MatchedTerm, focal_cls_loss, l1_loc_loss, total_loss
from .align import AlignLossWeights, align_encode, init_align_encoder, triphase_loss
from .boxes import BevBox
from .fusion import dynamic_fuse, init_fusion, modulate, normalize_error_map
from .heatmap import gaussian_focal_loss
from .interact import attend, init_attention, potential_energy_map
from .specialty import error_distribution, init_specialty_head, predict_offset_uncertainty, specialty_loss

OP_TOL = 1e-4
PIPELINE_TOL = 1e-3
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    errors: list[float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.errors)

    @property
    def ok(self) -> bool:
        return self.worst < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name:<24} max_rel_err={self.worst:.3e} tol={self.tol:.0e}"


def _away(rng, shape, lo=-2.0, hi=2.0, gap=0.1):
    """Uniform values with |x| >= gap."""
    x = rng.uniform(lo, hi, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _offgrid(rng, shape, n):
    """Cell coordinates in [-1, n], never within 0.1 of an integer or half."""
    base = rng.integers(-1, n, shape).astype(float)
    frac = rng.choice([0.15, 0.3, 0.35, 0.65, 0.7, 0.85], shape) + rng.uniform(-0.04, 0.04, shape)
    return base + frac


def _weighted(out, r):
    return gc.vsum(out * r)


# each builder: rng -> (function of dict of leaves, dict of arrays)
def _unary(op, make=lambda rng, s: rng.uniform(-2, 2, s)):
    def build(rng):
        shape = (3, 4)
        r = rng.normal(size=shape)
        return (lambda v: _weighted(op(v["x"]), r)), {"x": make(rng, shape)}

    return build


def _binary(op, make_b=lambda rng, s: rng.uniform(-2, 2, s)):
    def build(rng):
        r = rng.normal(size=(3, 4))
        return (lambda v: _weighted(op(v["a"], v["b"]), r)), {"a": rng.uniform(-2, 2, (3, 4)),
                                                               "b": make_b(rng, (1, 4))}

    return build


def _b_clip(rng):
    x = rng.uniform(-2, 2, (3, 4))
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.1, x * 1.3, x)
    r = rng.normal(size=x.shape)
    return (lambda v: _weighted(gc.clip(v["x"], -1.0, 1.0), r)), {"x": x}


def _b_reduce(rng):
    x = rng.uniform(-2, 2, (2, 3, 4))
    r = rng.normal(size=(2, 4))
    return (lambda v: _weighted(gc.vsum(v["x"], axis=1), r) + gc.mean(v["x"] * v["x"])), {"x": x}


def _b_vmax(rng):
    x = rng.permutation(12).reshape(3, 4) * 0.3 + rng.uniform(0, 0.05, (3, 4))
    return (lambda v: gc.vmax(v["x"]) * gc.vsum(v["x"])), {"x": x}


def _b_softmax(rng):
    r = rng.normal(size=(3, 5))
    return (lambda v: _weighted(gc.softmax(v["x"], axis=-1), r)), {"x": rng.uniform(-2, 2, (3, 5))}


def _b_shape_ops(rng):
    r = rng.normal(size=(2, 6, 4))

    def f(v):
        a = gc.reshape(v["x"], (2, 3, 4))
        b = gc.broadcast(v["y"], (2, 3, 4))
        c = gc.concat([a, b], axis=1)
        return _weighted(c, r) + gc.vsum(gc.getitem(v["x"], (slice(0, 4), [1, 0])))

    return f, {"x": rng.uniform(-2, 2, (6, 4)), "y": rng.uniform(-2, 2, (1, 3, 1))}


def _b_einsum(rng):
    r = rng.normal(size=(3, 5))
    return (lambda v: _weighted(gc.einsum("ij,jk->ik", v["a"], v["b"]), r)), {
        "a": rng.uniform(-2, 2, (3, 4)), "b": rng.uniform(-2, 2, (4, 5))}


def _b_conv2d(rng):
    r = rng.normal(size=(3, 5, 6))
    return (lambda v: _weighted(gc.conv2d(v["x"], v["w"], v["b"]), r)), {
        "x": rng.uniform(-2, 2, (2, 5, 6)), "w": rng.uniform(-1, 1, (3, 2, 3, 3)), "b": rng.uniform(-1, 1, 3)}


def _b_conv1x1(rng):
    r = rng.normal(size=(3, 4, 5))
    return (lambda v: _weighted(gc.conv1x1(v["x"], v["w"], v["b"]), r)), {
        "x": rng.uniform(-2, 2, (2, 4, 5)), "w": rng.uniform(-1, 1, (3, 2)), "b": rng.uniform(-1, 1, 3)}


def _b_sample(rng):
    r = rng.normal(size=(2, 3, 7))
    return (lambda v: _weighted(gc.sample(v["vals"], v["xs"], v["ys"]), r)), {
        "vals": rng.uniform(-2, 2, (2, 3, 5, 6)), "xs": _offgrid(rng, (2, 7), 6), "ys": _offgrid(rng, (2, 7), 5)}


def _b_deform_sum(rng):
    r = rng.normal(size=(2, 3, 4, 5))
    return (lambda v: _weighted(gc.deform_sum(v["vals"], v["xs"], v["ys"], v["a"]), r)), {
        "vals": rng.uniform(-2, 2, (2, 3, 5, 6)), "xs": _offgrid(rng, (2, 3, 4, 5), 6),
        "ys": _offgrid(rng, (2, 3, 4, 5), 5), "a": rng.uniform(0, 1, (2, 3, 4, 5))}


def _b_gfl(rng):
    t = rng.uniform(0, 0.9, (2, 4, 5))
    t[0, 1, 2] = t[1, 3, 0] = 1.0
    return (lambda v: gaussian_focal_loss(gc.sigmoid(v["z"]), t)), {"z": rng.uniform(-3, 3, (2, 4, 5))}


def _b_triphase(rng):
    t = rng.uniform(0, 0.9, (2, 4, 5))
    t[1, 2, 2] = 1.0
    fx = rng.uniform(-2, 2, (3, 4, 5))
    fy = fx + _away(rng, fx.shape, -1, 1, 0.05)

    def f(v):
        return triphase_loss(v["fx"], v["fy"], gc.sigmoid(v["hx"]), gc.sigmoid(v["hy"]), t,
                             AlignLossWeights(0.1, 1.0))

    return f, {"fx": fx, "fy": fy, "hx": rng.uniform(-3, 3, t.shape), "hy": rng.uniform(-3, 3, t.shape)}


def _b_specialty(rng):
    star = rng.uniform(0, 3, (4, 5))

    def f(v):
        mx, ex = gc.softplus(v["mx"]), gc.softplus(v["ex"]) + 0.1
        my, ey = gc.softplus(v["my"]), gc.softplus(v["ey"]) + 0.1
        return specialty_loss(mx, ex, my, ey, star, 2.0) + gc.vsum(error_distribution(mx, ex))

    return f, {k: rng.uniform(-1, 1, (4, 5)) for k in ("mx", "ex", "my", "ey")}


def _b_cls_loc(rng):
    gt = BevBox(2, 1.0, -2.0, 4.0, 1.8)

    def f(v):
        box = v["b"] * 1.0
        return focal_cls_loss(gc.sigmoid(v["s"]), 2) + l1_loc_loss(box, gt, 8.0)

    target = np.array([1.0 / 8, -2.0 / 8, np.log(4.0), np.log(1.8)])
    return f, {"s": rng.uniform(-3, 3, 4), "b": target + _away(rng, 4, -0.5, 0.5, 0.05)}


def _b_total(rng):
    t = rng.uniform(0, 0.9, (4, 3, 5))
    t[2, 1, 1] = 1.0
    gts = (BevBox(2, 1.0, -2.0, 4.0, 1.8), BevBox(0, -1.0, 0.5, 2.0, 1.2))
    boxes = np.array([[1 / 8, -2 / 8, np.log(4.0), np.log(1.8)], [-1 / 8, 0.5 / 8, np.log(2.0), np.log(1.2)]])

    def f(v):
        heat = gc.sigmoid(v["z"])
        terms = [MatchedTerm(gc.sigmoid(gc.getitem(v["s"], i)), gc.getitem(v["b"], i), g, w)
                 for i, (g, w) in enumerate(zip(gts, (0.7, 0.4)))]
        extra = gc.vsum(gc.square(v["x"]))
        total, _ = total_loss(terms, heat, t, extra * 0.1, extra * 0.05, LossCoeffs(1.0, 0.25, 1.0))
        return total

    return f, {"z": rng.uniform(-3, 3, t.shape), "s": rng.uniform(-3, 3, (2, 4)),
               "b": boxes + _away(rng, boxes.shape, -0.5, 0.5, 0.05), "x": rng.uniform(-1, 1, 3)}


def _attention(mode):
    def build(rng):
        p = init_attention(rng, 3, "a.", mode, heads=2, points=3, noise=0.3)
        p = {k: v + rng.normal(0, 0.2, v.shape) for k, v in p.items()}
        r = rng.normal(size=(3, 5, 6))
        names = sorted(p)

        def f(v):
            return _weighted(attend(v["q"], v["v"], {k: v[k] for k in names}, "a."), r)

        return f, {"q": rng.uniform(0, 1, (3, 5, 6)), "v": rng.uniform(0, 1, (3, 5, 6)), **p}

    return build


def _b_potential(rng):
    r = rng.normal(size=(4, 5, 6))
    p = {"pot.w": rng.uniform(-0.5, 0.5, (4, 6, 3, 3)), "pot.b": rng.uniform(-0.5, 0.5, 4)}
    return (lambda v: _weighted(potential_energy_map(v["ps"], v["hs"], v, "pot.").P, r)), {
        "ps": rng.uniform(0, 1, (3, 5, 6)), "hs": rng.uniform(0, 1, (3, 5, 6)), **p}


def _b_encoder(rng):
    p = init_align_encoder(rng, 4, "camera", 2)
    r = rng.normal(size=(4, 5, 6))
    return (lambda v: _weighted(align_encode(v["x"], v, "camera"), r)), {"x": rng.uniform(-1, 1, (4, 5, 6)), **p}


def _b_offset_head(rng):
    p = init_specialty_head(rng, 4, "s.", mu_bias=0.0)
    r = rng.normal(size=(2, 5, 6))

    def f(v):
        mu, eps = predict_offset_uncertainty(v["x"], v, "s.", 0.1)
        return _weighted(gc.concat([gc.reshape(mu, (1, 5, 6)), gc.reshape(eps, (1, 5, 6))], axis=0), r)

    return f, {"x": rng.uniform(-1, 1, (4, 5, 6)), **p}


def _fusion(order):
    def build(rng):
        p = init_fusion(rng, 4, 2)
        r = rng.normal(size=(4, 5, 6))
        e = rng.uniform(0.1, 1.0, (5, 6))
        e[2, 3] = 1.5

        def f(v):
            fx = modulate(v["fx"], v["px"], normalize_error_map(v["e"]))
            return _weighted(dynamic_fuse(fx, v["fy"], v, order), r)

        return f, {"fx": rng.uniform(-1, 1, (4, 5, 6)), "fy": rng.uniform(-1, 1, (4, 5, 6)),
                   "px": rng.uniform(-1, 1, (4, 5, 6)), "e": e, **p}

    return build


OPS: dict[str, Callable] = {
    "add": _binary(gc.add),
    "sub": _binary(gc.sub),
    "mul": _binary(gc.mul),
    "div": _binary(gc.div, lambda rng, s: _away(rng, s, -2, 2, 0.5)),
    "exp": _unary(gc.exp),
    "log": _unary(gc.log, lambda rng, s: rng.uniform(0.3, 3, s)),
    "square": _unary(gc.square),
    "power": _unary(lambda x: gc.power(x, 2.5), lambda rng, s: rng.uniform(0.3, 2, s)),
    "abs": _unary(gc.vabs, _away),
    "relu": _unary(gc.relu, _away),
    "tanh": _unary(gc.tanh),
    "sigmoid": _unary(gc.sigmoid),
    "softplus": _unary(gc.softplus),
    "clip": _b_clip,
    "sum_mean": _b_reduce,
    "max": _b_vmax,
    "softmax": _b_softmax,
    "reshape_concat_index": _b_shape_ops,
    "einsum": _b_einsum,
    "conv2d": _b_conv2d,
    "conv1x1": _b_conv1x1,
    "bilinear_sample": _b_sample,
    "deform_sum": _b_deform_sum,
    "focal_heatmap_loss": _b_gfl,
    "triphase_loss": _b_triphase,
    "specialty_loss": _b_specialty,
    "cls_loc_loss": _b_cls_loc,
    "total_loss": _b_total,
    "attn_deformable": _attention("deformable"),
    "attn_local": _attention("local"),
    "attn_global": _attention("global"),
    "potential_map": _b_potential,
    "align_encoder": _b_encoder,
    "offset_head": _b_offset_head,
    "fuse_channel_space": _fusion("channel_space"),
    "fuse_space_channel": _fusion("space_channel"),
}


def _pick_coords(rng, at: dict, limit: int):
    flat = [(k, i) for k in sorted(at) for i in range(np.size(at[k]))]
    if len(flat) <= limit:
        return None
    return [flat[j] for j in rng.choice(len(flat), limit, replace=False)]


def check_op(name: str, trials: int = 10, seed: int = 0, max_probes: int = 60) -> CheckResult:
    errs = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        f, at = OPS[name](rng)
        errs.append(gc.grad_check(f, at, EPS, _pick_coords(rng, at, max_probes)))
    return CheckResult(name, errs, OP_TOL)


def check_pipeline(cfg=None, trials: int = 10, seed: int = 0, probes: int = 12) -> CheckResult:
    """Gradient of the full training loss with respect to randomly chosen
    parameter entries, on small random scenes. The matched set and quality
    weights are taken from the unperturbed pass and held fixed, and the
    stop-gradient in front of the specialty heads is lifted (finite
    differences cannot see it). The network has thousands of relu units, so
    a probe is only kept when the +-eps stencil takes the same branch of
    every piecewise op as the centre point."""
    from .config import RunConfig
    from .grid_core import GridSpec
    from .synth import generate_scene
    from .train import forward_pipeline, init_params, scene_targets

    cfg = cfg or RunConfig()
    grid = GridSpec(-4.0, 4.0, -4.0, 4.0, 0.5)
    gen = replace(cfg.scene.gen, n_boxes=(2, 3), margin=0.5)
    pc = replace(cfg.pipeline, specialty=replace(cfg.pipeline.specialty, detach_input=False))
    errs = []
    for t in range(trials):
        rng = np.random.default_rng([seed, 1000 + t])
        scene = generate_scene(int(rng.integers(1 << 30)), gen, grid)
        targets = scene_targets(scene, pc)
        params = init_params(pc, int(rng.integers(1 << 30)))
        # move away from the symmetric start (zero offsets sit on cell edges)
        params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in params.items()}
        _, bd, _ = forward_pipeline(scene, params, pc, targets, gc.Tape())
        plan = bd.extras["plan"]
        names = sorted(params)

        def branches(values):
            t = gc.Tape()
            with gc.record_branches() as rec:
                forward_pipeline(scene, values, pc, targets, t, trainable=False, plan=plan)
            return rec

        base = branches(params)
        coords = []
        for _ in range(50 * probes):
            if len(coords) == probes:
                break
            k = names[int(rng.integers(len(names)))]
            i = int(rng.integers(params[k].size))
            smooth = True
            for step in (EPS, -EPS):
                moved = dict(params)
                moved[k] = params[k].copy()
                moved[k].flat[i] += step
                smooth = smooth and branches(moved) == base
            if smooth:
                coords.append((k, i))

        def loss(v):
            return forward_pipeline(scene, v, pc, targets, next(iter(v.values())).tape, plan=plan)[1].total

        errs.append(gc.grad_check(loss, params, EPS, coords))
    return CheckResult("pipeline", errs, PIPELINE_TOL)


def run_all(trials: int = 10, seed: int = 0, pipeline: bool = True) -> list[CheckResult]:
    out = [check_op(n, trials, seed) for n in OPS]
    if pipeline:
        out.append(check_pipeline(trials=trials, seed=seed))
    return out
