"""Declarative experiment config: JSON in, validated dataclasses out.

Unknown keys are rejected (catching typos beats silently ignoring them) and
every validation error names the offending field path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import AugmentConfig, SynthSpec
from .losses import LossWeights
from .model import ModelConfig
from .postproc import PostConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind != "adam":
            raise ConfigError(f"optimizer.kind: only 'adam' is supported, got {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"optimizer.lr: must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"optimizer.{name}: must be in [0,1), got {v}")
        if self.eps <= 0:
            raise ConfigError(f"optimizer.eps: must be > 0, got {self.eps}")


@dataclass
class DataConfig:
    synth: SynthSpec | None = None
    volume: str | None = None
    labels: str | None = None

    def __post_init__(self):
        if self.synth is None and (self.volume is None or self.labels is None):
            raise ConfigError("data: provide either a synth spec or both volume and labels paths")
        if self.synth is not None and self.volume is not None:
            raise ConfigError("data: synth spec and volume paths are mutually exclusive")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    post: PostConfig = field(default_factory=PostConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(enabled=False))
    data: DataConfig = field(default_factory=lambda: DataConfig(synth=SynthSpec()))
    batch_size: int = 1
    iterations: int = 500
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations: must be >= 1, got {self.iterations}")
        if self.log_every < 1:
            raise ConfigError(f"log_every: must be >= 1, got {self.log_every}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every: must be >= 0, got {self.checkpoint_every}")

    def to_dict(self):
        d = asdict(self)
        if self.data.synth is None:
            d["data"].pop("synth")
        else:
            d["data"].pop("volume")
            d["data"].pop("labels")
        return d


def _build(cls, raw, path, wrap=ConfigError):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    fields = {f.name for f in cls.__dataclass_fields__.values()} if hasattr(cls, "__dataclass_fields__") else set()
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; valid keys are {sorted(fields)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**coerced)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise wrap(f"{path}: {e}") from e


_SECTIONS = {
    "model": ModelConfig,
    "losses": LossWeights,
    "post": PostConfig,
    "optimizer": OptimizerConfig,
    "augment": AugmentConfig,
}
_SCALARS = ("batch_size", "iterations", "seed", "log_every", "checkpoint_every")


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"config root: expected an object, got {type(raw).__name__}")
    known = set(_SECTIONS) | set(_SCALARS) | {"data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"config root: unknown key(s) {sorted(unknown)}; valid keys are {sorted(known)}")

    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, raw[key], f"config.{key}")
    if "data" in raw:
        d = dict(raw["data"]) if isinstance(raw["data"], dict) else None
        if d is None:
            raise ConfigError("config.data: expected an object")
        synth = _build(SynthSpec, d.pop("synth"), "config.data.synth") if "synth" in d else None
        volume = d.pop("volume", None)
        labels = d.pop("labels", None)
        if d:
            raise ConfigError(f"config.data: unknown key(s) {sorted(d)}")
        kwargs["data"] = DataConfig(synth=synth, volume=volume, labels=labels)
    for key in _SCALARS:
        if key in raw:
            val = raw[key]
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"config.{key}: must be an integer, got {val!r}")
            kwargs[key] = val
    return ExperimentConfig(**kwargs)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(raw)
