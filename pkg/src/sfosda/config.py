"""Run configuration: nested dataclasses loaded from YAML, validated and hashed."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from sfosda.data import ShiftSpec, SourceSpec
from sfosda.errors import ConfigError
from sfosda.losses import IM_DIVERSITY
from sfosda.model import EMA_SCHEDULES
from sfosda.separation import CRITERIA, PSEUDOLABEL_SCHEMES

PRESETS = (
    "full", "wo_triplet", "wo_consistency", "wo_im", "wo_curriculum", "wo_co_training",
    "criterion_entropy", "criterion_ce", "pseudolabel_student",
)


@dataclass
class DataConfig:
    source: SourceSpec = field(default_factory=SourceSpec)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    # files override generation when given; relative paths resolve against the config file
    source_path: str | None = None
    target_path: str | None = None


@dataclass
class ModelConfig:
    hidden: int = 32
    n_hidden: int = 2
    bottleneck: int = 16
    freeze_known_bias: bool = True


@dataclass
class SourceTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    alpha: float = 0.1
    val_fraction: float = 0.1


@dataclass
class AugmentConfig:
    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    strong_dropout: float = 0.1
    strong_jitter: float = 0.1
    weak_views: int = 1
    strong_views: int = 5


@dataclass
class Toggles:
    co_training: bool = True
    curriculum: bool = True
    triplet: bool = True
    consistency: bool = True
    im: bool = True


@dataclass
class AdaptConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-2
    lr_decay: bool = True
    momentum: float = 0.9
    weight_decay: float = 1e-3
    delta_t: float = 0.8
    beta: float = 0.01
    gamma0: float = 1.0
    alpha: float = 0.1
    zeta1: float = 0.01
    zeta2_max: float = 0.5
    m_max: float = 0.9995
    ema_schedule: str = "inverse"
    criterion: str = "jsd"
    pseudolabel: str = "ensemble"
    curriculum_granularity: str = "iteration"
    triplet_space: str = "logits"
    im_diversity: str = "uniform"
    gmm_warm_start: bool = False
    warmup_epochs: int = 0


@dataclass
class SweepConfig:
    axis: str | None = None
    values: list[Any] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    name: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    source_training: SourceTrainConfig = field(default_factory=SourceTrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    toggles: Toggles = field(default_factory=Toggles)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> "RunConfig":
        a, s, aug = self.adapt, self.source_training, self.augment
        checks = [
            (a.epochs >= 0, "adapt.epochs must be >= 0"),
            (s.epochs >= 0, "source_training.epochs must be >= 0"),
            (a.batch_size >= 1 and s.batch_size >= 1, "batch sizes must be positive"),
            (a.lr > 0 and s.lr > 0, "learning rates must be positive"),
            (0 <= a.momentum < 1 and 0 <= s.momentum < 1, "momentum must lie in [0, 1)"),
            (a.weight_decay >= 0 and s.weight_decay >= 0, "weight decay must be non-negative"),
            (0 <= a.delta_t < 1, "adapt.delta_t must lie in [0, 1)"),
            (0 <= a.beta < 1, "adapt.beta must lie in [0, 1)"),
            (0.5 <= a.gamma0 <= 1, "adapt.gamma0 must lie in [0.5, 1]"),
            (0 <= a.alpha < 1 and 0 <= s.alpha < 1, "label smoothing must lie in [0, 1)"),
            (a.zeta1 >= 0 and a.zeta2_max >= 0, "zeta weights must be non-negative"),
            (0 <= a.m_max <= 1, "adapt.m_max must lie in [0, 1]"),
            (a.ema_schedule in EMA_SCHEDULES, f"adapt.ema_schedule must be one of {EMA_SCHEDULES}"),
            (a.criterion in CRITERIA, f"adapt.criterion must be one of {CRITERIA}"),
            (a.pseudolabel in PSEUDOLABEL_SCHEMES, f"adapt.pseudolabel must be one of {PSEUDOLABEL_SCHEMES}"),
            (a.curriculum_granularity in ("iteration", "epoch"), "curriculum_granularity must be iteration or epoch"),
            (a.triplet_space in ("logits", "features"), "triplet_space must be logits or features"),
            (a.im_diversity in IM_DIVERSITY, f"adapt.im_diversity must be one of {IM_DIVERSITY}"),
            (a.warmup_epochs >= 0, "warmup_epochs must be >= 0"),
            (aug.weak_views == 1, "exactly one weak view is supported"),
            (aug.strong_views >= 0, "strong_views must be >= 0"),
            (0 <= aug.strong_dropout < 1, "strong_dropout must lie in [0, 1)"),
            (min(aug.weak_sigma, aug.strong_sigma, aug.strong_jitter) >= 0, "augmentation magnitudes must be >= 0"),
            (0 <= s.val_fraction < 1, "val_fraction must lie in [0, 1)"),
            (self.data.source.n >= 1 and self.data.shift.n >= 1, "sample counts must be positive"),
            (self.data.source.n_classes >= 2, "need at least two source classes"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        sh = self.data.shift
        if sh.unknown_cluster_count > 0 and not 0 < sh.unknown_mixing_fraction < 1:
            raise ConfigError("data.shift.unknown_mixing_fraction must lie in (0, 1)")
        if not sh.scale > 0:
            raise ConfigError("data.shift.scale must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that influences results (the name and sweep block excluded)."""
        d = self.to_dict()
        d.pop("name", None)
        d.pop("sweep", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def ablation_id(self) -> str:
        default = RunConfig()
        parts = [f"wo_{k}" for k, v in dataclasses.asdict(self.toggles).items() if not v]
        if self.adapt.criterion != default.adapt.criterion:
            parts.append(f"criterion_{self.adapt.criterion}")
        if self.adapt.pseudolabel != default.adapt.pseudolabel:
            parts.append("pseudolabel_student")
        return "+".join(parts) if parts else "full"

    def replicate(self, k: int) -> "RunConfig":
        """The k-th seed replicate: run, source and shift seeds all offset by k."""
        return self.with_overrides({
            "seed": self.seed + k,
            "data.source.seed": self.data.source.seed + k,
            "data.shift.seed": self.data.shift.seed + k,
        })

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied, e.g. ``{"adapt.delta_t": 0.7}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = copy.deepcopy(value)
        return from_dict(d)


def _build(cls, values: dict[str, Any] | None, where: str):
    values = dict(values or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in values:
            continue
        v = values[name]
        sub = _nested_type(cls, name)
        if sub is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{where + '.' if where else ''}{name} must be a mapping")
            v = _build(sub, v, f"{where + '.' if where else ''}{name}")
        kwargs[name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from None


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "source_training"): SourceTrainConfig,
    (RunConfig, "augment"): AugmentConfig,
    (RunConfig, "adapt"): AdaptConfig,
    (RunConfig, "toggles"): Toggles,
    (RunConfig, "sweep"): SweepConfig,
    (DataConfig, "source"): SourceSpec,
    (DataConfig, "shift"): ShiftSpec,
}


def _nested_type(cls, name):
    return _NESTED.get((cls, name))


def from_dict(d: dict[str, Any]) -> RunConfig:
    cfg = _build(RunConfig, d, "")
    return cfg.validate()


def load_config(path) -> RunConfig:
    """Read a YAML config; a top-level ``preset: <name>`` key starts from a shipped preset.

    A bare preset name that is not an existing file loads that preset.
    """
    path = Path(path)
    if str(path) in PRESETS and not path.exists():
        return load_preset(str(path))
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    preset = raw.pop("preset", None)
    if preset is not None:
        raw = _deep_merge(_preset_dict(preset), raw)
    cfg = from_dict(raw)
    for attr in ("source_path", "target_path"):
        p = getattr(cfg.data, attr)
        if p is not None and not Path(p).is_absolute():
            setattr(cfg.data, attr, str((path.parent / p).resolve()))
    return cfg


def _deep_merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("sfosda.presets").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text) or {}


def load_preset(name: str) -> RunConfig:
    return from_dict(_preset_dict(name))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
