"""Run configuration: TOML file keys mirror the field names here."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .engine import EpisodeHyper
from .losses import FocalParams, LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    """Unknown keys, missing paths, or out-of-range values."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment optimizer with decoupled weight decay."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    lr_schedule: str = "constant"  # hook; only "constant" is implemented

    def __post_init__(self):
        if self.lr_schedule != "constant":
            raise ConfigError(f"unsupported lr_schedule {self.lr_schedule!r}")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data/world"
    seed: int = 7
    total_iterations: int = 20000
    episodes_per_batch: int = 16
    lambda_pi: float = 0.5
    kappa: float = 0.2
    cont_normalize: bool = True
    checkpoint_every: int = 5000
    shuffle_embeddings: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cls_groups: tuple[str, ...] = ("pos", "other", "bg")
    reg_groups: tuple[str, ...] = ("pos",)
    cont_groups: tuple[str, ...] = ("pos", "other")

    def __post_init__(self):
        if not 0.0 < self.lambda_pi <= 1.0:
            raise ConfigError(f"lambda_pi must be in (0, 1], got {self.lambda_pi}")
        if self.kappa <= 0.0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.total_iterations < 0 or self.episodes_per_batch < 1:
            raise ConfigError("iterations must be >= 0 and batch size >= 1")

    def hyper(self) -> EpisodeHyper:
        return EpisodeHyper(
            weights=self.loss,
            focal=self.focal,
            kappa=self.kappa,
            cont_normalize=self.cont_normalize,
            cls_groups=tuple(self.cls_groups),
            reg_groups=tuple(self.reg_groups),
            cont_groups=tuple(self.cont_groups),
        )

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossWeights,
    "focal": FocalParams,
    "optimizer": OptimizerConfig,
}
_LIST_KEYS = {"cls_groups", "reg_groups", "cont_groups"}


def run_config_from_dict(data: dict) -> RunConfig:
    kwargs = {}
    valid_top = set(RunConfig.__dataclass_fields__)
    for key, value in data.items():
        if key not in valid_top:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            section_cls = _SECTIONS[key]
            valid = set(section_cls.__dataclass_fields__)
            bad = set(value) - valid
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs[key] = section_cls(**value)
        elif key in _LIST_KEYS:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    data.update(overrides or {})
    return run_config_from_dict(data)


def require_dataset(config: RunConfig) -> Path:
    root = Path(config.dataset)
    if not (root / "vocabulary.json").is_file():
        raise ConfigError(f"dataset not found at {root} (missing vocabulary.json)")
    return root
