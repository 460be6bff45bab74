"""Run configuration: architecture, training hyperparameters and augmentation.

Configs are stored as YAML with three top-level sections::

    model:
      encoder: {input_height: 32, ..., stages: [{pepx_count: 1, out_channels: 16, attention_gate: false}, ...]}
      projection: {input_dim: 1024, hidden_dim: 512, output_dim: 128}
      classifier: {input_dim: 1024, num_classes: 3, layer_dims: [256, 64, 3]}
    train: {learning_rate: 0.00017, batch_size: 64, ...}
    augment: {enabled: true, flip_prob: 0.5, ...}
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data.images import AugmentConfig
from .errors import ConfigurationError
from .model.config import EncoderConfig, ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.7e-4
    batch_size: int = 64
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    temperature: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate_stage2: float | None = None
    balanced_sampling: bool = True
    grad_clip_norm: float | None = None
    prefetch: int = 4
    warm_start_path: str | None = None

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.learning_rate_stage2 is not None and not self.learning_rate_stage2 > 0:
            raise ConfigurationError("learning_rate_stage2 must be positive")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigurationError("grad_clip_norm must be positive when set")

    @property
    def stage2_learning_rate(self) -> float:
        return self.learning_rate if self.learning_rate_stage2 is None else self.learning_rate_stage2


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def desk(cls, size: int = 32, **train_overrides: Any) -> RunConfig:
        """Laptop-scale defaults used by the demos and the acceptance run."""
        return cls(model=ModelConfig(encoder=EncoderConfig.desk(size)), train=TrainConfig(**train_overrides))

    @property
    def image_size(self) -> tuple[int, int]:
        enc = self.model.encoder
        return enc.input_height, enc.input_width

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.to_dict(), "train": asdict(self.train), "augment": asdict(self.augment)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        unknown = set(d) - {"model", "train", "augment"}
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        try:
            return cls(
                model=ModelConfig.from_dict(d.get("model") or {}),
                train=TrainConfig(**(d.get("train") or {})),
                augment=AugmentConfig(**(d.get("augment") or {})),
            )
        except TypeError as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc

    def with_train(self, **overrides: Any) -> RunConfig:
        known = {f.name for f in fields(TrainConfig)}
        bad = set(overrides) - known
        if bad:
            raise ConfigurationError(f"unknown training option(s): {', '.join(sorted(bad))}")
        return replace(self, train=replace(self.train, **overrides))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config {path} must be a mapping")
    return RunConfig.from_dict(doc)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


def save_config(config: RunConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(dump_config(config), encoding="utf-8")
    return path
