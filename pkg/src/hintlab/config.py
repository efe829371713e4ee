"""Trainer configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Literal

from .errors import ConfigError
from .tasks import HintSpec


@dataclass(frozen=True)
class TrainerConfig:
    group_size: int = 8
    eps_clip: float = 0.2
    beta: float = 0.0
    mu: int = 1
    learning_rate: float = 0.05
    temperature: float = 0.9
    max_response: int | None = None
    batch_size: int = 8
    decoupled_prompts: bool = True
    ratio_context: Literal["decoupled", "literal_qstar"] = "decoupled"
    hint: HintSpec = field(default_factory=HintSpec)
    eps_std: float = 1e-6
    # Whether forced answer-prefix tokens enter the surrogate loss.
    train_forced_tokens: bool = True
    optimizer: Literal["sgd", "adam"] = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # Trust-region half-width on log-ratios; None means log(1 + eps_clip).
    delta: float | None = None
    # Steps per outer iteration; the reference policy is reset at each boundary.
    ref_refresh_interval: int = 100

    def __post_init__(self):
        if not 0.0 < self.eps_clip < 1.0:
            raise ConfigError(f"eps_clip must lie in (0, 1), got {self.eps_clip}")
        if self.mu < 1:
            raise ConfigError("mu must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.ratio_context not in ("decoupled", "literal_qstar"):
            raise ConfigError(f"unknown ratio_context {self.ratio_context!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.delta is not None and not self.delta > 0:
            raise ConfigError("delta must be > 0")
        if self.ref_refresh_interval < 1:
            raise ConfigError("ref_refresh_interval must be >= 1")
        if not isinstance(self.hint, HintSpec):
            raise ConfigError("hint must be a HintSpec")

    @property
    def trust_delta(self) -> float:
        return self.delta if self.delta is not None else math.log1p(self.eps_clip)

    def with_hint(self, hint: HintSpec) -> "TrainerConfig":
        return replace(self, hint=hint)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        d = dict(d)
        if "hint" in d and isinstance(d["hint"], dict):
            d["hint"] = HintSpec(**d["hint"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)
