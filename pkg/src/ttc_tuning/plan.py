"""Declarative description of one tuning stage."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .vit import resolve_globs

OPTIMIZERS = ("adamw", "sgd")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainPlan:
    trainable: list[str] = field(default_factory=lambda: ["head.*"])
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 30
    batch_size: int = 32
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        self.trainable = list(self.trainable)
        self.betas = tuple(self.betas)

    def resolve(self, model) -> list[str]:
        return resolve_globs(model, self.trainable)

    def frozen(self, model) -> list[str]:
        keep = set(self.resolve(model))
        return [n for n in model.params if n not in keep]

    def with_(self, **changes) -> "TrainPlan":
        return replace(self, **changes)
