"""Cosine annealing with warm restarts for the server merge rate."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class CosineSchedule:
    lr_min: float = 0.001
    lr_max: float = 0.5
    period: int = 500
    decay: float = 0.1

    def __post_init__(self):
        if self.lr_max < self.lr_min or self.lr_min < 0:
            raise ValueError("need lr_max >= lr_min >= 0")
        if self.decay < 0:
            raise ValueError("decay must be non-negative")
        if self.period < 1:
            raise ValueError("restart period must be >= 1")

    @classmethod
    def constant(cls, lr: float) -> "CosineSchedule":
        return cls(lr, lr, 1, 0.0)


def cosine_annealing_lr(i: int, cfg: CosineSchedule) -> float:
    """Rate for round ``i``: decays from the (decayed) maximum to ``lr_min`` each period.

    Each restart lowers the peak by ``decay``; nothing clamps it, so many
    restarts with a large decay drive the rate below ``lr_min``.
    """
    if i < 0:
        raise ValueError("round index must be non-negative")
    restarts, since = divmod(i, cfg.period)
    if since == 0:
        # at a restart the cosine term is exactly 1; skip the lr_min round trip
        return cfg.lr_max - restarts * cfg.decay
    amplitude = cfg.lr_max - cfg.lr_min - restarts * cfg.decay
    return cfg.lr_min + 0.5 * amplitude * (1.0 + math.cos(since / cfg.period * math.pi))
