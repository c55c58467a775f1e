"""Run configuration: nested dataclasses loaded from JSON/YAML.

Unknown keys are rejected with their dotted path. Environment variables of
the form ``DYNAFUSE_<SECTION>__<KEY>[__<KEY>...]=value`` override file
values (value parsed as JSON, falling back to a plain string), e.g.
``DYNAFUSE_PIPELINE__FUSION__ORDER=space_channel``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adaptive_head import ALT_MODES, LossCoeffs
from .align import AlignLossWeights
from .fusion import GATES, MERGE_INPUTS, ORDERS
from .grid_core import GridSpec
from .interact import MODES
from .synth import SceneGenConfig

ENV_PREFIX = "DYNAFUSE_"


class ConfigError(ValueError):
    pass


@dataclass
class AlignConfig:
    layers: int = 3
    pair: bool = True  # camera <-> lidar L1 term
    gt: bool = True  # heatmap supervision of each modality
    lambda1: float = 0.1
    lambda2: float = 1.0

    def weights(self) -> AlignLossWeights:
        return AlignLossWeights(self.lambda1 if self.pair else 0.0, self.lambda2 if self.gt else 0.0)


@dataclass
class InteractionConfig:
    enabled: bool = True
    mode: str = "deformable"
    heads: int = 4
    points: int = 4


@dataclass
class SpecialtyConfig:
    enabled: bool = True
    zeta: float = 2000.0
    d_max: float = 8.0
    eps_min: float = 1e-3
    share_weights: bool = False
    detach_input: bool = True  # heads read stop-gradient features
    gate: str = "log_minmax"  # how E becomes a [0, 1] gate: "log_minmax" or "max" (E / max E)


@dataclass
class FusionConfig:
    order: str = "channel_space"
    sk_reduction: int = 4
    merge_input: str = "concat"  # "concat": 2C -> C over both branches; "sum": C -> C over their sum


@dataclass
class AltConfig:
    mode: str = "both"
    eta: float = 1.0


@dataclass
class HeadConfig:
    train_top_k: int = 30
    train_score_thresh: float = 0.05
    match_radius: float = 2.0
    cls_bias: float = -2.19
    decoder_layers: int = 0


@dataclass
class PipelineConfig:
    channels: int = 8
    classes: int = 4
    modalities: str = "both"
    tda: bool = True
    mise: bool = True
    align: AlignConfig = field(default_factory=AlignConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    specialty: SpecialtyConfig = field(default_factory=SpecialtyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    alt: AltConfig = field(default_factory=AltConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 1.0

    @property
    def alt_enabled(self) -> bool:
        return self.alt.mode != "none"

    def coeffs(self) -> LossCoeffs:
        return LossCoeffs(self.alpha, self.beta, self.gamma)

    def validate(self) -> None:
        if self.modalities not in ("both", "camera", "lidar"):
            raise ConfigError(f"pipeline.modalities: unknown value {self.modalities!r}")
        if self.mise and not self.tda:
            raise ConfigError("pipeline.mise: interaction/specialty need the aligning stage (pipeline.tda)")
        if self.mise and self.modalities != "both":
            raise ConfigError("pipeline.mise: needs both modalities")
        if self.interaction.mode not in MODES:
            raise ConfigError(f"pipeline.interaction.mode: expected one of {MODES}")
        if self.fusion.order not in ORDERS:
            raise ConfigError(f"pipeline.fusion.order: expected one of {ORDERS}")
        if self.fusion.merge_input not in MERGE_INPUTS:
            raise ConfigError(f"pipeline.fusion.merge_input: expected one of {MERGE_INPUTS}")
        if self.specialty.gate not in GATES:
            raise ConfigError(f"pipeline.specialty.gate: expected one of {GATES}")
        if self.alt.mode not in ALT_MODES:
            raise ConfigError(f"pipeline.alt.mode: expected one of {ALT_MODES}")
        if not 1 <= self.align.layers:
            raise ConfigError("pipeline.align.layers: must be >= 1")
        if self.interaction.heads < 1 or self.interaction.points < 1:
            raise ConfigError("pipeline.interaction: heads and points must be >= 1")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("pipeline: alpha, beta, gamma must be non-negative")


@dataclass
class SceneConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    gen: SceneGenConfig = field(default_factory=SceneGenConfig)


@dataclass
class TrainConfig:
    seed: int = 7
    train_scenes: int = 20
    val_scenes: int = 10
    steps: int = 300
    lr: float = 5e-3
    clip_norm: float = 10.0
    clip_mode: str = "group"  # "group": per parameter group; "global": one norm over everything


@dataclass
class EvalConfig:
    top_k: int = 50
    score_thresh: float = 0.1
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (7,)
    jobs: int = 1


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        self.pipeline.validate()
        if self.train.clip_mode not in ("group", "global"):
            raise ConfigError("train.clip_mode: expected 'group' or 'global'")
        if self.train.steps < 0 or self.train.lr <= 0:
            raise ConfigError("train: steps must be >= 0 and lr > 0")
        if self.pipeline.classes != self.scene.gen.classes or self.pipeline.channels != self.scene.gen.channels:
            raise ConfigError("pipeline.classes/channels must match scene.gen.classes/channels")
        return self

    def to_dict(self) -> dict:
        return to_dict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        item = args[0] if args else typing.Any
        return tuple(_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, d: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            raise ConfigError(f"unknown config key: {path + '.' if path else ''}{key}")
    kwargs = {}
    for key, value in d.items():
        kwargs[key] = _coerce(hints[key], value, f"{path + '.' if path else ''}{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _apply_env(d: dict, environ) -> dict:
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"env {name}: {'.'.join(keys)} is not a section")
        node[keys[-1]] = value
    return d


def parse_config(d: dict | None = None, environ=None) -> RunConfig:
    base = to_dict(RunConfig())
    _merge(base, d or {}, "")
    if environ is not None:
        overrides = _apply_env({}, environ)
        _merge(base, overrides, "")
    return from_dict(RunConfig, base).validate()


def _merge(base: dict, new: dict, path: str) -> None:
    for k, v in new.items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key: {p}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{p}: expected a mapping")
            _merge(base[k], v, p)
        else:
            base[k] = v


def load_config(path=None, environ=None) -> RunConfig:
    """Defaults, then the file (JSON or YAML by suffix), then DYNAFUSE_* env."""
    d = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: cannot parse ({exc})") from exc
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(d, os.environ if environ is None else environ)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def reference() -> str:
    """Every key with its default, one per line."""
    lines = []

    def walk(d, prefix):
        for k, v in d.items():
            p = f"{prefix}.{k}" if prefix else k
            if isinstance(v, dict):
                walk(v, p)
            else:
                lines.append(f"{p} = {json.dumps(v)}")

    walk(to_dict(RunConfig()), "")
    return "\n".join(lines)
