"""Training configuration shared by the trainer, evaluation and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingDims:
    H_alpha: int = 8
    H_phi: int = 8
    H_psi: int = 8

    def __post_init__(self):
        if min(self.H_alpha, self.H_phi, self.H_psi) < 1:
            raise ConfigError("embedding dimensions must be >= 1")

    @property
    def H(self) -> int:
        # the prior starts node and community chains at the graph embedding
        if not self.H_alpha == self.H_phi == self.H_psi:
            raise ConfigError(
                f"H_alpha, H_phi and H_psi must be equal, got {self.H_alpha}, {self.H_phi}, {self.H_psi}"
            )
        return self.H_alpha


@dataclass(frozen=True)
class TrainingConfig:
    K: int = 3
    H_alpha: int = 8
    H_phi: int = 8
    H_psi: int = 8
    layers_z: int = 1
    layers_c: int = 1
    sigma_phi: float = 0.01
    sigma_psi: float = 0.01
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    max_epochs: int = 1000
    patience: int = 15
    tau_max: float = 1.0
    tau_min: float = 0.05
    tau_rate: float = 3e-4
    train_frac: float = 0.8
    val_frac: float = 0.1
    clip_norm: float = 10.0
    kl_warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.layers_z < 1 or self.layers_c < 1:
            raise ConfigError("MLP layer counts must be >= 1")
        for name in ("sigma_phi", "sigma_psi", "learning_rate", "tau_max", "tau_min", "tau_rate", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.kl_warmup_epochs < 0:
            raise ConfigError("kl_warmup_epochs must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if not self.tau_min < self.tau_max:
            raise ConfigError("tau_min must be below tau_max")
        if not (self.train_frac > 0 and self.val_frac > 0 and self.train_frac + self.val_frac < 1):
            raise ConfigError("train_frac + val_frac must be < 1 with both positive")
        self.dims.H  # equality check

    @property
    def dims(self) -> EmbeddingDims:
        return EmbeddingDims(self.H_alpha, self.H_phi, self.H_psi)

    @property
    def fractions(self) -> tuple[float, float]:
        return (self.train_frac, self.val_frac)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for k, v in data.items():
            default = getattr(cls, k)
            values[k] = int(v) if isinstance(default, int) and not isinstance(default, bool) else float(v)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainingConfig":
        data = json.loads(Path(path).read_text()) if path is not None else {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)
