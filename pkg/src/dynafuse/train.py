"""Forward pipeline, training loop, checkpoints and the ablation harness.

Seeds: scene ``i`` of the training split uses ``10_000 * seed + i``; the
validation split uses ``10_000 * seed + 5_000 + j``. Parameter groups and
the per-epoch scene order draw from their own PCG64 streams keyed by
``(seed, stream, group)``, so switching a module on or off never changes
the initial values of the other modules.
"""
from __future__ import annotations

import io
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import grid_core as gc
from .adaptive_head import (Instance, MatchedTerm, decode_maps, head_outputs, init_head,
                            instance_quality, match_instances, total_loss)
from .align import (MODALITIES, align_encode, init_align_encoder, init_modal_head, modal_heatmap_head,
                    triphase_loss)
from .boxes import bev_iou
from .config import ConfigError, PipelineConfig, RunConfig, to_dict
from .evaluation import EvalResult, toy_map
from .fusion import baseline_merge, dynamic_fuse, error_gate, init_baseline_merge, init_fusion, modulate
from .grid_core import Tape, Var
from .heatmap import gaussian_focal_loss, render_gt_heatmap
from .interact import (cross_interaction, init_attention, init_potential_conv, potential_energy_map,
                       self_interaction)
from .specialty import (error_distribution, head_prefix, init_specialty_head, predict_offset_uncertainty,
                        specialty_loss, target_offsets)
from .synth import Scene, make_scenes, rng_for

log = logging.getLogger(__name__)

STREAM_PARAMS = 11
STREAM_ORDER = 12
VAL_OFFSET = 5_000


class TrainingError(RuntimeError):
    def __init__(self, step: int, what: str = "loss is not finite"):
        super().__init__(f"training diverged at step {step}: {what}")
        self.step = step


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _group_rng(seed: int, group: str) -> np.random.Generator:
    return rng_for(seed, STREAM_PARAMS, zlib.crc32(group.encode()))


def active_modalities(cfg: PipelineConfig) -> tuple[str, ...]:
    return MODALITIES if cfg.modalities == "both" else (cfg.modalities,)


def init_params(cfg: PipelineConfig, seed: int) -> dict[str, np.ndarray]:
    """Parameters for every module the config enables."""
    cfg.validate()
    C, K = cfg.channels, cfg.classes
    p: dict[str, np.ndarray] = {}
    mods = active_modalities(cfg)
    if cfg.tda:
        for m in mods:
            p.update(init_align_encoder(_group_rng(seed, f"align.{m}"), C, m, cfg.align.layers))
            p.update(init_modal_head(_group_rng(seed, f"align.{m}.head"), C, K, m, cfg.head.cls_bias))
    if cfg.mise:
        if cfg.interaction.enabled:
            ic = cfg.interaction
            for name in ("cross_x", "cross_y", "self_x", "self_y"):
                p.update(init_attention(_group_rng(seed, f"mi.{name}"), K, f"mi.{name}.", ic.mode,
                                        ic.heads, ic.points))
            for m in ("x", "y"):
                p.update(init_potential_conv(K, C, f"mi.pot_{m}."))
        if cfg.specialty.enabled:
            if cfg.specialty.share_weights:
                p.update(init_specialty_head(_group_rng(seed, "se.shared"), C, head_prefix("camera", True)))
            else:
                for m in MODALITIES:
                    p.update(init_specialty_head(_group_rng(seed, f"se.{m}"), C, head_prefix(m)))
        p.update(init_fusion(_group_rng(seed, "fuse"), C, cfg.fusion.sk_reduction,
                              merge_input=cfg.fusion.merge_input))
    elif len(mods) == 2:
        p.update(init_baseline_merge(_group_rng(seed, "base"), C))
    p.update(init_head(_group_rng(seed, "head"), C, K, cfg.head.cls_bias, decoder_layers=cfg.head.decoder_layers))
    return p


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class SceneTargets:
    heatmap: np.ndarray
    mu_star: np.ndarray


def scene_targets(scene: Scene, cfg: PipelineConfig) -> SceneTargets:
    hm = render_gt_heatmap(scene.gt_boxes, scene.spec, cfg.classes).data
    return SceneTargets(hm, target_offsets(scene.gt_boxes, scene.spec, cfg.specialty.d_max))


@dataclass
class ForwardResult:
    tape: Tape
    params: dict
    heat: Var
    reg: Var
    fused: Var
    tda: Var | float = 0.0
    specialty: Var | float = 0.0
    maps: dict = field(default_factory=dict)  # named intermediates for plotting


def _as_vars(params: Mapping, tape: Tape, trainable: bool) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, Var):
            out[k] = v
        elif trainable:
            out[k] = tape.leaf(v, name=k)
        else:
            out[k] = tape.const(v)
    return out


def forward_features(scene: Scene, params: Mapping, cfg: PipelineConfig, targets: SceneTargets | None = None,
                     tape: Tape | None = None, trainable: bool = True) -> ForwardResult:
    """Encoders -> interaction/specialty modulation -> fusion -> head."""
    cfg.validate()
    tape = tape if tape is not None else Tape()
    targets = targets or scene_targets(scene, cfg)
    p = _as_vars(params, tape, trainable)
    raw = {"camera": tape.const(scene.camera_feat.data), "lidar": tape.const(scene.lidar_feat.data)}
    mods = active_modalities(cfg)
    maps: dict = {}
    l_tda: Var | float = 0.0
    l_s: Var | float = 0.0

    if cfg.tda:
        feats = {m: align_encode(raw[m], p, m) for m in mods}
        heats = {m: modal_heatmap_head(feats[m], p, m) for m in mods}
        w = cfg.align.weights()
        if len(mods) == 2:
            l_tda = triphase_loss(feats["camera"], feats["lidar"], heats["camera"], heats["lidar"],
                                  targets.heatmap, w)
        else:
            l_tda = gaussian_focal_loss(heats[mods[0]], targets.heatmap) * w.lambda2
        maps.update({f"heat_{m}": heats[m] for m in mods})
    else:
        feats = {m: raw[m] for m in mods}
        heats = {}

    if len(mods) == 1:
        fused = feats[mods[0]]
    elif cfg.mise:
        fx, fy = feats["camera"], feats["lidar"]
        px = py = ex = ey = None
        if cfg.interaction.enabled:
            hx, hy = heats["camera"], heats["lidar"]
            cx, cy = cross_interaction(hx, hy, p, ("mi.cross_x.", "mi.cross_y."))
            sx = self_interaction(hx, p, "mi.self_x.")
            sy = self_interaction(hy, p, "mi.self_y.")
            px = potential_energy_map(cx, sx, p, "mi.pot_x.").P
            py = potential_energy_map(cy, sy, p, "mi.pot_y.").P
            maps.update({"cross_x": cx, "cross_y": cy, "P_x": px, "P_y": py})
        if cfg.specialty.enabled:
            sc = cfg.specialty
            sx_in, sy_in = (gc.stop_gradient(fx), gc.stop_gradient(fy)) if sc.detach_input else (fx, fy)
            mu_x, eps_x = predict_offset_uncertainty(sx_in, p, head_prefix("camera", sc.share_weights), sc.eps_min)
            mu_y, eps_y = predict_offset_uncertainty(sy_in, p, head_prefix("lidar", sc.share_weights), sc.eps_min)
            E_x, E_y = error_distribution(mu_x, eps_x), error_distribution(mu_y, eps_y)
            ex, ey = error_gate(mu_x, eps_x, sc.gate), error_gate(mu_y, eps_y, sc.gate)
            l_s = specialty_loss(mu_x, eps_x, mu_y, eps_y, targets.mu_star, sc.zeta)
            maps.update({"E_x": E_x, "E_y": E_y, "gate_x": ex, "gate_y": ey, "mu_x": mu_x, "mu_y": mu_y})
        fused = dynamic_fuse(modulate(fx, px, ex), modulate(fy, py, ey), p, cfg.fusion.order)
    else:
        fused = baseline_merge(feats["camera"], feats["lidar"], p)

    heat, reg = head_outputs(fused, p)
    maps["fused"] = fused
    return ForwardResult(tape, p, heat, reg, fused, l_tda, l_s, maps)


def matched_terms(res: ForwardResult, scene: Scene, cfg: PipelineConfig,
                  plan: list | None = None) -> tuple[list[Instance], list[MatchedTerm], list]:
    """Decode, match to ground truth and build the per-instance loss terms
    with their (detached) quality weights.

    The third return value is the plan ``[(row, col, gt index, weight)]``;
    passing it back in skips decoding and matching, which makes the loss a
    smooth function of the parameters (used for gradient checks).
    """
    hc = cfg.head
    spec = scene.spec
    inst: list[Instance] = []
    if plan is None:
        inst = decode_maps(res.heat.value, res.reg.value, spec, hc.train_top_k, hc.train_score_thresh)
        matches = match_instances(inst, scene.gt_boxes, hc.match_radius)
        plan = []
        for i in sorted(matches):
            gt = scene.gt_boxes[matches[i]]
            q = inst[i]
            phi, wt = instance_quality(q.score, bev_iou(q.box, gt), cfg.alt.eta, cfg.alt.mode)
            q.matched_gt, q.quality, q.weight = matches[i], phi, wt
            plan.append((q.cell[0], q.cell[1], matches[i], wt))
    if not plan:
        return inst, [], plan
    rows = np.array([r for r, _, _, _ in plan])
    cols = np.array([c for _, c, _, _ in plan])
    scores = res.heat[:, rows, cols]  # (K, n)
    regv = res.reg[:, rows, cols]  # (4, n)
    d = cfg.specialty.d_max
    scale = np.array([spec.cell_size / d, spec.cell_size / d, 1.0, 1.0])[:, None]
    offset = np.stack([(spec.x_min + (cols + 0.5) * spec.cell_size) / d,
                       (spec.y_min + (rows + 0.5) * spec.cell_size) / d,
                       np.zeros(len(plan)), np.zeros(len(plan))])
    boxv = regv * scale + offset
    terms = [MatchedTerm(scores[:, n], boxv[:, n], scene.gt_boxes[g], wt) for n, (_, _, g, wt) in enumerate(plan)]
    return inst, terms, plan


def forward_pipeline(scene: Scene, params: Mapping, cfg: PipelineConfig, targets: SceneTargets | None = None,
                     tape: Tape | None = None, trainable: bool = True, plan: list | None = None):
    """Full pass: returns (instances, loss breakdown, forward result)."""
    targets = targets or scene_targets(scene, cfg)
    res = forward_features(scene, params, cfg, targets, tape, trainable)
    inst, terms, plan = matched_terms(res, scene, cfg, plan)
    total, bd = total_loss(terms, res.heat, targets.heatmap, res.specialty, res.tda, cfg.coeffs(),
                           cfg.specialty.d_max)
    bd.extras["matched"] = len(terms)
    bd.extras["plan"] = plan
    return inst, bd, res


def predict(scene: Scene, params: Mapping, cfg: RunConfig) -> list[Instance]:
    res = forward_features(scene, params, cfg.pipeline, trainable=False)
    res.tape.release()
    return decode_maps(res.heat.value, res.reg.value, scene.spec, cfg.eval.top_k, cfg.eval.score_thresh)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    fingerprint: str
    step: int
    config: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = json.dumps({"fingerprint": self.fingerprint, "step": self.step, "config": self.config},
                          sort_keys=True)
        arrays = {f"p/{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
        return cls(params, meta["fingerprint"], int(meta["step"]), meta.get("config", {}))

    def equals(self, other: "Checkpoint") -> bool:
        return (self.fingerprint == other.fingerprint and self.step == other.step
                and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def split_seeds(cfg: RunConfig) -> tuple[list[int], list[int]]:
    s, t = cfg.train.seed, cfg.train
    base = 10_000 * s
    return [base + i for i in range(t.train_scenes)], [base + VAL_OFFSET + j for j in range(t.val_scenes)]


def make_split(cfg: RunConfig) -> tuple[list[Scene], list[Scene]]:
    tr, va = split_seeds(cfg)
    return (make_scenes(tr, cfg.scene.gen, cfg.scene.grid), make_scenes(va, cfg.scene.gen, cfg.scene.grid))


def param_group(name: str) -> str:
    """Module a parameter belongs to: the name up to its last dot."""
    return name.rsplit(".", 1)[0]


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def clip_by_group_norm(grads: dict, max_norm: float) -> float:
    """Clip each parameter group separately; returns the unclipped global norm."""
    groups: dict[str, list[str]] = {}
    for k in sorted(grads):
        groups.setdefault(param_group(k), []).append(k)
    total = 0.0
    for keys in groups.values():
        sub = {k: grads[k] for k in keys}
        n = clip_by_global_norm(sub, max_norm)
        grads.update(sub)
        total += n * n
    return math.sqrt(total)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[dict]
    eval: EvalResult | None

    def loss_csv(self) -> str:
        buf = io.StringIO()
        cols = ("total", "cls", "loc", "heat", "specialty", "tda")
        buf.write("step," + ",".join(cols) + ",grad_norm,matched\n")
        for i, row in enumerate(self.losses):
            buf.write(f"{i}," + ",".join(f"{row[c]:.6f}" for c in cols)
                      + f",{row['grad_norm']:.6f},{row['matched']}\n")
        return buf.getvalue()


def evaluate(params: Mapping, cfg: RunConfig, scenes: list[Scene]) -> EvalResult:
    preds = {i: predict(s, params, cfg) for i, s in enumerate(scenes)}
    gts = {i: list(s.gt_boxes) for i, s in enumerate(scenes)}
    return toy_map(preds, gts, cfg.pipeline.classes, cfg.eval.thresholds)


def train_loop(cfg: RunConfig, scenes: tuple[list[Scene], list[Scene]] | None = None,
               evaluate_val: bool = True) -> TrainResult:
    cfg.validate()
    pc, tc = cfg.pipeline, cfg.train
    train_scenes, val_scenes = scenes if scenes is not None else make_split(cfg)
    if tc.steps > 0 and not train_scenes:
        raise ConfigError("train.train_scenes: need at least one training scene")
    params = init_params(pc, tc.seed)
    targets = [scene_targets(s, pc) for s in train_scenes]
    losses: list[dict] = []
    order: np.ndarray = np.empty(0, dtype=int)
    for step in range(tc.steps):
        pos = step % len(train_scenes)
        if pos == 0:
            order = rng_for(tc.seed, STREAM_ORDER, step // len(train_scenes)).permutation(len(train_scenes))
        i = int(order[pos])
        tape = Tape()
        _, bd, _ = forward_pipeline(train_scenes[i], params, pc, targets[i], tape)
        row = bd.values()
        if not math.isfinite(row["total"]):
            raise TrainingError(step)
        grads = gc.backward(tape, bd.total)
        tape.release()
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(step, "gradient is not finite")
        clip = clip_by_group_norm if tc.clip_mode == "group" else clip_by_global_norm
        row["grad_norm"] = clip(grads, tc.clip_norm)
        row["matched"] = bd.extras["matched"]
        losses.append(row)
        for k, g in grads.items():
            params[k] = params[k] - tc.lr * g
    ck = Checkpoint(params, cfg.fingerprint(), tc.steps, to_dict(cfg))
    ev = evaluate(params, cfg, val_scenes) if evaluate_val and val_scenes else None
    return TrainResult(ck, losses, ev)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def _pipe(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, pipeline=replace(cfg.pipeline, **changes))


def _sub(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return _pipe(cfg, **{section: replace(getattr(cfg.pipeline, section), **changes)})


def ablation_rows(base: RunConfig, table: str) -> list[tuple[dict, RunConfig]]:
    """(row descriptor, config) for every row of one ablation table; the
    last row of each table is the default full model."""
    full = _pipe(base, tda=True, mise=True, modalities="both")
    full = _sub(full, "alt", mode=base.pipeline.alt.mode if base.pipeline.alt.mode != "none" else "both")
    table = table.upper().replace("-", "")
    if table == "IVA":
        none = _sub(_pipe(full, tda=False, mise=False), "alt", mode="none")
        tda = _sub(_pipe(full, mise=False), "alt", mode="none")
        mise = _sub(full, "alt", mode="none")
        return [({"TDA": 0, "MISE": 0, "ALT": 0}, none), ({"TDA": 1, "MISE": 0, "ALT": 0}, tda),
                ({"TDA": 1, "MISE": 1, "ALT": 0}, mise), ({"TDA": 1, "MISE": 1, "ALT": 1}, full)]
    if table == "IVB":
        return [({"pair": int(a), "gt": int(b)}, _sub(full, "align", pair=a, gt=b))
                for a, b in ((False, False), (True, False), (False, True), (True, True))]
    if table == "IVC":
        rows = []
        for mi, se in ((False, False), (True, False), (False, True), (True, True)):
            c = _sub(_sub(full, "interaction", enabled=mi), "specialty", enabled=se)
            rows.append(({"MI": int(mi), "SE": int(se)}, c))
        return rows
    if table == "IVD":
        return [({"alt": m}, _sub(full, "alt", mode=m)) for m in ("none", "cls", "iou", "both")]
    if table == "IVE":
        return [({"interaction": m}, _sub(full, "interaction", mode=m)) for m in ("local", "global", "deformable")]
    if table == "IVF":
        return [({"encoders": n}, _sub(full, "align", layers=n)) for n in (2, 3, 4)]
    if table == "IVG":
        return [({"specialty": n}, _sub(full, "specialty", share_weights=s))
                for n, s in (("share", True), ("specific", False))]
    if table == "IVH":
        return [({"order": "space_channel"}, _sub(full, "fusion", order="space_channel")),
                ({"order": "channel_space"}, _sub(full, "fusion", order="channel_space"))]
    raise ConfigError(f"unknown ablation table {table!r}; expected IVa..IVh")


TABLES = ("IVa", "IVb", "IVc", "IVd", "IVe", "IVf", "IVg", "IVh")


def _run_one(cfg: RunConfig) -> float:
    return train_loop(cfg).eval.mAP


@dataclass
class AblationTable:
    table: str
    rows: list[dict]
    seeds: tuple[int, ...]
    scores: list[list[float]]  # per row, per seed

    def means(self) -> list[float]:
        return [float(np.mean(s)) for s in self.scores]

    def to_csv(self) -> str:
        keys = list(self.rows[0])
        buf = io.StringIO()
        buf.write(",".join(keys) + ",mAP," + ",".join(f"seed_{s}" for s in self.seeds) + "\n")
        for desc, sc, m in zip(self.rows, self.scores, self.means()):
            buf.write(",".join(str(desc[k]) for k in keys) + f",{m:.6f}," + ",".join(f"{v:.6f}" for v in sc) + "\n")
        return buf.getvalue()


def ablation_run(base: RunConfig, table: str, seeds=None, jobs: int = 1) -> AblationTable:
    seeds = tuple(seeds if seeds is not None else base.ablation.seeds)
    rows = ablation_rows(base, table)
    jobs_list = [replace(cfg, train=replace(cfg.train, seed=s)).validate() for _, cfg in rows for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            flat = list(ex.map(_run_one, jobs_list))
    else:
        flat = [_run_one(c) for c in jobs_list]
    n = len(seeds)
    scores = [flat[i * n:(i + 1) * n] for i in range(len(rows))]
    return AblationTable(table, [d for d, _ in rows], seeds, scores)


# ---------------------------------------------------------------------------
# Robustness to a missing modality
# ---------------------------------------------------------------------------

ROBUSTNESS_COLUMNS = ("seed", "full", "camera", "lidar", "full_cam_drop", "camera_cam_drop")


@dataclass
class RobustnessRow:
    seed: int
    full: float
    camera: float
    lidar: float
    full_cam_drop: float
    camera_cam_drop: float

    @property
    def fused_wins(self) -> bool:
        return self.full >= self.camera and self.full >= self.lidar

    @property
    def degrades_less(self) -> bool:
        return self.full - self.full_cam_drop < self.camera - self.camera_cam_drop


def _single_modality(cfg: RunConfig, which: str) -> RunConfig:
    # same encoder, heatmap supervision and head as the full model, no fusion
    return _pipe(cfg, modalities=which, mise=False)


def robustness_run(base: RunConfig, seeds, dropout: float = 0.5) -> list[RobustnessRow]:
    """Train the full model and both single-modality models per seed with the
    same budget, score them on the clean validation split, then score the
    full and camera-only models again with camera cells dropped."""
    from .synth import corrupt_modality

    out = []
    for s in seeds:
        cfg = replace(base, train=replace(base.train, seed=int(s))).validate()
        val = make_split(cfg)[1]
        dropped = [corrupt_modality(v, "camera", dropout) for v in val]
        scores = {}
        for name, c in (("full", cfg), ("camera", _single_modality(cfg, "camera")),
                        ("lidar", _single_modality(cfg, "lidar"))):
            params = train_loop(c, evaluate_val=False).checkpoint.params
            scores[name] = evaluate(params, c, val).mAP
            if name != "lidar":
                scores[f"{name}_cam_drop"] = evaluate(params, c, dropped).mAP
        out.append(RobustnessRow(int(s), **scores))
        log.info("robustness seed %d: %s", s, scores)
    return out


def robustness_csv(rows: list[RobustnessRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(ROBUSTNESS_COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r.seed}," + ",".join(f"{getattr(r, k):.6f}" for k in ROBUSTNESS_COLUMNS[1:]) + "\n")
    return buf.getvalue()
