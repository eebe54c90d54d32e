"""Adam with global-norm clipping and a warmup / exponential-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, NumericError

BETA1 = 0.9
BETA2 = 0.98
ADAM_EPS = 1e-9


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 3e-3
    warmup: int = 4000
    decay: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup <= 0 or self.decay <= 0:
            raise ConfigError("schedule constants must be positive")


def lr_at_step(t: int, schedule: Schedule) -> float:
    """Linear warmup to ``base_lr`` at step ``warmup``, then
    ``base_lr * decay ** ((t - warmup) / warmup)``."""
    if t < 1:
        raise ConfigError(f"learning-rate step must be >= 1, got {t}")
    w = schedule.warmup
    if t <= w:
        return schedule.base_lr * t / w
    return schedule.base_lr * schedule.decay ** ((t - w) / w)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    clip_norm: float | None = 1.0,
) -> float:
    """Clip ``grads`` to ``clip_norm`` and apply one Adam update in place.

    Parameters without a gradient are left untouched. Returns the pre-clip
    global gradient norm.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = next(n for n in sorted(grads) if not np.all(np.isfinite(grads[n])))
        raise NumericError(f"non-finite gradient for parameter {bad!r}; aborting")
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    state.step += 1
    t = state.step
    step_size = lr / (1.0 - BETA1**t)
    inv_c2 = 1.0 / (1.0 - BETA2**t)
    for name in sorted(grads):
        g = grads[name] if scale == 1.0 else grads[name] * np.float32(scale)
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * np.square(g)
        denom = np.sqrt(v * inv_c2)
        denom += ADAM_EPS
        p -= step_size * m / denom
    return norm
