"""Run configuration: nested dataclasses loaded from YAML, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from ..augment import CHANNEL_SETS
from ..errors import DataError


class ConfigError(DataError):
    pass


@dataclass
class DataSection:
    """External cases; empty strings mean the phantom stage output is used."""

    cases_dir: str = ""
    findings: str = ""
    exclusions: str = ""


@dataclass
class PhantomSection:
    n_cases: int = 40
    lesions_per_case: tuple = (2, 4)
    significant_fraction: float = 0.5
    contrast_gap: float = 1.0
    noise_sigma: float = 0.04
    amplitude_jitter: float = 0.35
    seed: int = 0


@dataclass
class PreprocessSection:
    target_spacing_mm: float = 1.0
    rel_threshold: float = 0.5
    max_radius_mm: float = 15.0
    morph_radius_vox: int = 1
    fallback_radius_mm: float = 5.0
    val_fraction: float = 0.25


@dataclass
class AugmentSection:
    channel_sets: tuple = ("DAK", "DAT", "AKT", "DKT")
    train_rotations: int = 2
    train_shears: int = 1
    val_rotations: int = 1
    val_shears: int = 1
    val_translate: bool = False


@dataclass
class CnnSection:
    learning_rates: tuple = (3e-4,)
    seeds: tuple = (0,)
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 25
    patience: int = 6
    mirror_prob: float = 0.5


@dataclass
class GbmSection:
    n_trees: int = 50
    max_depth: tuple = (2, 3, 4)
    learning_rate: tuple = (0.05, 0.1, 0.3)
    l2_lambda: tuple = (1.0, 5.0)
    min_child_hessian: float = 1e-3
    subsample: float = 1.0
    seeds: tuple = (0,)
    k_folds: int = 5
    backward_selection: bool = False
    min_features: int = 1
    top_k: int = 5


@dataclass
class EnsembleSection:
    max_iters: int = 100
    patience: int = 5
    pool: str = "all"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    cnn: CnnSection = field(default_factory=CnnSection)
    gbm: GbmSection = field(default_factory=GbmSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)

    def validate(self) -> "RunConfig":
        bad = [c for c in self.augment.channel_sets if c not in CHANNEL_SETS]
        if bad or not self.augment.channel_sets:
            raise ConfigError(f"unknown channel sets {bad}; choose from {sorted(CHANNEL_SETS)}")
        if self.ensemble.pool not in ("all", "cnn", "gbm"):
            raise ConfigError("ensemble.pool must be one of all, cnn, gbm")
        if not 0 < self.preprocess.val_fraction < 1:
            raise ConfigError("preprocess.val_fraction must lie in (0, 1)")
        if self.gbm.top_k < 1 or self.gbm.k_folds < 2:
            raise ConfigError("gbm.top_k must be >= 1 and gbm.k_folds >= 2")
        if not self.cnn.learning_rates or not self.cnn.seeds:
            raise ConfigError("cnn.learning_rates and cnn.seeds must be non-empty")
        if bool(self.data.cases_dir) != bool(self.data.findings):
            raise ConfigError("data.cases_dir and data.findings must be given together")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false")
            kwargs[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path}: expected a number, got {value!r}")
            kwargs[name] = type(default)(value) if isinstance(default, float) or float(value).is_integer() else value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: Optional[dict]) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path) -> RunConfig:
    """Parse a YAML config; relative data paths are resolved against its directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    cfg = config_from_dict(data)
    base = path.resolve().parent
    for name in ("cases_dir", "findings", "exclusions"):
        value = getattr(cfg.data, name)
        if value:
            setattr(cfg.data, name, str((base / value).resolve()))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
