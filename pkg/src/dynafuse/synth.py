"""Deterministic two-modality BEV scenes.

The camera stream sees classes well but places objects loosely (centre
jitter, blur, additive noise). The LiDAR stream places objects exactly but
mixes each class with a fixed confusable partner and loses cells far from
the ego vehicle.

Randomness: every draw comes from numpy's PCG64 seeded with
``SeedSequence([seed, stream])``; ``stream`` is one of the constants below,
so adding a new consumer never shifts existing draws.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .boxes import BevBox
from .grid_core import FeatureGrid, GridSpec
from .heatmap import gaussian_blob, gaussian_radius

STREAM_BOXES = 1
STREAM_CAMERA = 2
STREAM_LIDAR = 3
STREAM_CORRUPT = 4

# class id -> confusable partner for the LiDAR stream
CONFUSION_PAIRS = {0: 1, 1: 0, 2: 3, 3: 2}
# mean (length, width) in metres per class
CLASS_SIZES = ((4.5, 2.0), (4.0, 1.8), (1.8, 0.8), (0.8, 0.8))


def rng_for(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream, *extra])))


@dataclass(frozen=True)
class SceneGenConfig:
    n_boxes: tuple[int, int] = (3, 6)
    classes: int = 4
    channels: int = 8
    cam_noise: float = 0.15
    cam_pos_jitter: float = 0.6
    cam_blur: float = 1.5
    cam_confusion: float = 0.0
    lidar_confusion: float = 0.45
    lidar_dropout: float = 0.5
    lidar_drop_radius: float = 12.0
    lidar_noise: float = 0.03
    amplitudes: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7)
    margin: float = 1.0

    def __post_init__(self):
        lo, hi = self.n_boxes
        if lo < 0 or hi < lo:
            raise ValueError(f"bad n_boxes range {self.n_boxes}")
        if self.classes < 1:
            raise ValueError("need at least one class")
        if self.channels < self.classes + 3:
            raise ValueError("channels must hold class, objectness and two size channels")
        for name in ("cam_confusion", "lidar_confusion", "lidar_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("cam_noise", "cam_pos_jitter", "lidar_noise", "cam_blur"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def amplitude(self, k: int) -> float:
        return self.amplitudes[k % len(self.amplitudes)]


@dataclass(frozen=True, eq=False)
class Scene:
    seed: int
    spec: GridSpec
    gt_boxes: tuple[BevBox, ...]
    camera_feat: FeatureGrid
    lidar_feat: FeatureGrid
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.seed == other.seed and self.spec == other.spec
                and self.gt_boxes == other.gt_boxes and self.camera_feat == other.camera_feat
                and self.lidar_feat == other.lidar_feat)

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "spec": asdict(self.spec),
            "gt_boxes": [b.to_dict() for b in self.gt_boxes],
            "camera_feat": _encode(self.camera_feat),
            "lidar_feat": _encode(self.lidar_feat),
            "meta": self.meta,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        d = json.loads(text)
        return cls(int(d["seed"]), GridSpec(**d["spec"]), tuple(BevBox.from_dict(b) for b in d["gt_boxes"]),
                   _decode(d["camera_feat"]), _decode(d["lidar_feat"]), d.get("meta", {}))

    def save(self, path) -> str:
        text = self.to_json()
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_json(Path(path).read_text())


def _encode(g: FeatureGrid) -> dict:
    raw = np.ascontiguousarray(g.data, dtype="<f8").tobytes()
    return {"channels": g.channels, "height": g.height, "width": g.width,
            "dtype": "<f8", "data_b64": base64.b64encode(raw).decode("ascii")}


def _decode(d: dict) -> FeatureGrid:
    arr = np.frombuffer(base64.b64decode(d["data_b64"]), dtype="<f8")
    return FeatureGrid(arr.reshape(d["channels"], d["height"], d["width"]))


def sample_boxes(rng: np.random.Generator, cfg: SceneGenConfig, spec: GridSpec) -> list[BevBox]:
    lo, hi = cfg.n_boxes
    n = int(rng.integers(lo, hi + 1))
    boxes: list[BevBox] = []
    attempts = 0
    while len(boxes) < n and attempts < 100 * (n + 1):
        attempts += 1
        k = int(rng.integers(0, cfg.classes))
        ml, mw = CLASS_SIZES[k % len(CLASS_SIZES)]
        length = ml * float(rng.uniform(0.85, 1.15))
        width = mw * float(rng.uniform(0.85, 1.15))
        cx = float(rng.uniform(spec.x_min + cfg.margin, spec.x_max - cfg.margin))
        cy = float(rng.uniform(spec.y_min + cfg.margin, spec.y_max - cfg.margin))
        yaw = float(rng.uniform(-math.pi, math.pi))
        # keep objects apart so every centre is resolvable
        if any(math.hypot(cx - b.cx, cy - b.cy) < 3.0 for b in boxes):
            continue
        boxes.append(BevBox(k, cx, cy, length, width, yaw))
    return boxes


def _render(boxes, cfg: SceneGenConfig, spec: GridSpec, centers, blur: float, confusion: float) -> np.ndarray:
    feat = np.zeros((cfg.channels, spec.height, spec.width))
    K = cfg.classes
    for b, (x, y) in zip(boxes, centers):
        sigma = gaussian_radius(b.length, b.width, spec) * blur
        blob = gaussian_blob(spec, x, y, sigma)
        amp = cfg.amplitude(b.class_id)
        partner = CONFUSION_PAIRS.get(b.class_id, b.class_id)
        if partner >= K:
            partner = b.class_id
        mix = confusion if partner != b.class_id else 0.0
        np.maximum(feat[b.class_id], (1.0 - mix) * amp * blob, out=feat[b.class_id])
        if mix:
            np.maximum(feat[partner], mix * amp * blob, out=feat[partner])
        np.maximum(feat[K], blob, out=feat[K])
        np.maximum(feat[K + 1], (b.length / 5.0) * blob, out=feat[K + 1])
        np.maximum(feat[K + 2], (b.width / 2.0) * blob, out=feat[K + 2])
    return feat


def generate_scene(seed: int, cfg: SceneGenConfig = SceneGenConfig(), spec: GridSpec = GridSpec()) -> Scene:
    if cfg.classes < 1:
        raise ValueError("empty class set")
    boxes = sample_boxes(rng_for(seed, STREAM_BOXES), cfg, spec)

    rc = rng_for(seed, STREAM_CAMERA)
    cam_centers = [(b.cx + rc.normal(0.0, cfg.cam_pos_jitter) if cfg.cam_pos_jitter else b.cx,
                    b.cy + rc.normal(0.0, cfg.cam_pos_jitter) if cfg.cam_pos_jitter else b.cy) for b in boxes]
    cam = _render(boxes, cfg, spec, cam_centers, cfg.cam_blur, cfg.cam_confusion)
    if cfg.cam_noise:
        cam = cam + rc.normal(0.0, cfg.cam_noise, cam.shape)

    rl = rng_for(seed, STREAM_LIDAR)
    lidar = _render(boxes, cfg, spec, [(b.cx, b.cy) for b in boxes], 1.0, cfg.lidar_confusion)
    if cfg.lidar_noise:
        lidar = lidar + rl.normal(0.0, cfg.lidar_noise, lidar.shape)
    if cfg.lidar_dropout:
        gx, gy = spec.cell_centers()
        far = np.hypot(gx, gy) > cfg.lidar_drop_radius
        drop = far & (rl.random(far.shape) < cfg.lidar_dropout)
        lidar = lidar * ~drop
    return Scene(int(seed), spec, tuple(boxes), FeatureGrid(cam), FeatureGrid(lidar))


def corrupt_modality(s: Scene, which: str, dropout: float, salt: int = 0) -> Scene:
    """Zero each cell of one modality independently with probability ``dropout``."""
    if which not in ("camera", "lidar"):
        raise ValueError(f"unknown modality {which!r}")
    if not 0.0 <= dropout <= 1.0:
        raise ValueError("dropout must lie in [0, 1]")
    grid = s.camera_feat if which == "camera" else s.lidar_feat
    if dropout == 0.0:
        return s
    rng = rng_for(s.seed, STREAM_CORRUPT, 0 if which == "camera" else 1, salt)
    keep = rng.random((grid.height, grid.width)) >= dropout
    new = FeatureGrid(grid.data * keep)
    return replace(s, **{f"{which}_feat": new})


def make_scenes(seeds, cfg: SceneGenConfig = SceneGenConfig(), spec: GridSpec = GridSpec()) -> list[Scene]:
    return [generate_scene(int(s), cfg, spec) for s in seeds]
