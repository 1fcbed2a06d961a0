"""Training configuration with strict JSON parsing.

Unknown keys are rejected rather than ignored so a typo in a config file
cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    # optimization
    base_lr: float = 5e-5
    weight_decay: float = 2e-5
    epochs: int = 20
    batch_size: int = 64
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 5
    seed: int = 0
    # model
    embed_dim: int = 32
    prompt_length: int = 8
    attention_dropout: float = 0.5
    descriptions_per_class: int = 16
    views_per_image: int = 4
    beta_prior: tuple[float, float] = (1.0, 9.0)
    tau: float = 0.01
    primitive_loss_weight: float = 0.1
    dense_cov_limit: int = 512
    # surrogate encoder backend
    encoder_seed: int = 101
    image_noise: float = 0.1
    view_noise: float = 0.05
    latent_skew: float = 0.5
    # behaviour switches
    recompute_every_step: bool = False
    use_lid_margins: bool = True
    use_decomposition: bool = True
    bias_grid_size: int = 41

    def __post_init__(self):
        self.beta_prior = tuple(float(x) for x in self.beta_prior)
        self.validate()

    def validate(self) -> None:
        positive = {
            "base_lr": self.base_lr, "epochs_plus": self.epochs + 1,
            "batch_size": self.batch_size, "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every, "embed_dim": self.embed_dim,
            "prompt_length": self.prompt_length, "tau": self.tau,
            "descriptions_per_class": self.descriptions_per_class,
            "bias_grid_size": self.bias_grid_size - 1,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"config field {name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.views_per_image < 0:
            raise ConfigError("views_per_image must be >= 0")
        if self.weight_decay < 0 or self.primitive_loss_weight < 0:
            raise ConfigError("weights must be >= 0")
        if not (0.0 <= self.attention_dropout <= 1.0):
            raise ConfigError("attention_dropout must lie in [0, 1]")
        if len(self.beta_prior) != 2 or min(self.beta_prior) <= 0:
            raise ConfigError("beta_prior must be two positive numbers")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - cls.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a JSON object in {path}")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["beta_prior"] = list(self.beta_prior)
        return out

    def replace(self, **kwargs) -> "TrainConfig":
        merged = self.to_dict()
        unknown = set(kwargs) - self.field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(kwargs)
        return TrainConfig.from_dict(merged)

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def learning_rate_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 1-indexed epoch."""
        decays = max(0, (epoch - 1)) // self.lr_decay_every
        return self.base_lr * (self.lr_decay_factor ** decays)
