"""Training hyper-parameters and the width-scaled learning-rate schedule.

Base rate alpha = c / sqrt(d * L).  Three phases: a linear warmup from
alpha/3 over the first ``warmup_epochs`` epochs, a plateau at exactly alpha,
then a geometric decay by ``decay_factor`` every ``decay_every`` epochs once
``decay_start`` is reached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigurationError, ContractError


@dataclass
class TrainHyper:
    lr_coefficient: float = 1.5e-2
    warmup_epochs: int = 3
    decay_factor: float = 0.2
    decay_every: int = 2
    decay_start: int = 10
    batch_size: int = 64
    epochs: int = 13
    lam: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr_coefficient", "warmup_epochs", "decay_every",
                     "decay_start", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigurationError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.lam < 0.0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")

    def to_dict(self) -> dict:
        out = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "lam"}
        out["lambda"] = self.lam
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainHyper":
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown train config fields: {sorted(extra)}")
        return cls(**raw)


def lr_at(epoch: int, step: int, hyper: TrainHyper, d: int, L: int) -> float:
    """Learning rate for a given epoch.

    The schedule is epoch-granular; ``step`` is part of the signature so a
    finer-grained warmup could slot in without touching call sites, but it
    does not affect the value today.
    """
    if epoch < 0 or step < 0:
        raise ContractError(f"lr_at: epoch and step must be >= 0, got ({epoch}, {step})")
    alpha = hyper.lr_coefficient / math.sqrt(d * L)
    if epoch < hyper.warmup_epochs:
        floor = alpha / 3.0
        return floor + (alpha - floor) * (epoch / hyper.warmup_epochs)
    if epoch < hyper.decay_start:
        return alpha
    exponent = (epoch - hyper.decay_start) // hyper.decay_every + 1
    return alpha * hyper.decay_factor**exponent
