"""Domain-aligning encoders, modal heatmap heads and the triphase objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import grid_core as gc
from .grid_core import Var
from .heatmap import gaussian_focal_loss

MODALITIES = ("camera", "lidar")


@dataclass(frozen=True)
class AlignLossWeights:
    lambda1: float = 0.1  # modality-pair L1 weight
    lambda2: float = 1.0  # heatmap-supervision weight

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def uniform_fan_in(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_modality(modality: str) -> None:
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")


def init_align_encoder(rng: np.random.Generator, channels: int, modality: str, n_layers: int = 3,
                       identity: bool = False) -> dict[str, np.ndarray]:
    """3x3 channel-preserving kernels. ``identity`` gives center-tap-1 kernels,
    otherwise center-tap identity plus fan-in scaled uniform noise."""
    _check_modality(modality)
    if n_layers < 1:
        raise ValueError("an aligning encoder needs at least one layer")
    out = {}
    for i in range(n_layers):
        w = np.zeros((channels, channels, 3, 3))
        w[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        if not identity:
            w += uniform_fan_in(rng, w.shape, gain=0.5)
        out[f"align.{modality}.w{i}"] = w
        out[f"align.{modality}.b{i}"] = np.zeros(channels)
    return out


def encoder_depth(p: Mapping, modality: str) -> int:
    n = 0
    while f"align.{modality}.w{n}" in p:
        n += 1
    return n


def align_encode(f, p: Mapping, modality: str) -> Var:
    """Conv stack with rectifiers between layers; the last layer stays linear."""
    _check_modality(modality)
    n = encoder_depth(p, modality)
    if n == 0:
        raise ValueError(f"no aligning encoder parameters for {modality}")
    x = gc.as_var(f, gc._tape_of(*(p[f"align.{modality}.w{i}"] for i in range(n))))
    w0 = p[f"align.{modality}.w0"]
    if x.shape[0] != w0.shape[1]:
        raise ValueError(f"channel mismatch: features have {x.shape[0]}, encoder expects {w0.shape[1]}")
    for i in range(n):
        x = gc.conv2d(x, p[f"align.{modality}.w{i}"], p[f"align.{modality}.b{i}"])
        if i < n - 1:
            x = gc.relu(x)
    return x


def init_modal_head(rng: np.random.Generator, channels: int, classes: int, modality: str,
                    bias: float = -2.19) -> dict[str, np.ndarray]:
    _check_modality(modality)
    return {
        f"align.{modality}.head_w": uniform_fan_in(rng, (classes, channels)),
        f"align.{modality}.head_b": np.full(classes, bias),
    }


def modal_heatmap_head(f, p: Mapping, modality: str) -> Var:
    """1x1 conv to class channels followed by a logistic squash."""
    return gc.sigmoid(gc.conv1x1(f, p[f"align.{modality}.head_w"], p[f"align.{modality}.head_b"]))


def l1_mean(a, b) -> Var:
    return gc.mean(gc.vabs(gc.sub(a, b)))


def triphase_loss(Fx, Fy, Hx, Hy, Fg, w: AlignLossWeights = AlignLossWeights()) -> Var:
    """lambda1 * mean|Fx - Fy| + lambda2 * (GFL(Hx, Fg) + GFL(Hy, Fg))."""
    tape = gc._tape_of(Fx, Fy, Hx, Hy)
    Fx, Fy, Hx, Hy = (gc.as_var(v, tape) for v in (Fx, Fy, Hx, Hy))
    if Fx.shape != Fy.shape:
        raise ValueError(f"feature shape mismatch {Fx.shape} vs {Fy.shape}")
    if Hx.shape != Hy.shape:
        raise ValueError(f"heatmap shape mismatch {Hx.shape} vs {Hy.shape}")
    pair = l1_mean(Fx, Fy) * w.lambda1
    gt = (gaussian_focal_loss(Hx, Fg) + gaussian_focal_loss(Hy, Fg)) * w.lambda2
    return pair + gt
