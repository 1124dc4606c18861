"""Adam optimizer with bias correction and a stepped learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = ["LrSchedule", "AdamState", "NonFiniteGradientError", "adam_step"]


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or infinities; the step is rejected."""


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: multiply by ``decay_factor`` every ``decay_interval`` epochs.

    Decay starts at ``start_epoch`` (0-based); before that the base rate is
    used unchanged.  ``decay_factor=1`` disables decay.
    """

    base_rate: float
    decay_factor: float = 1.0
    decay_interval: int = 1
    start_epoch: int = 0

    def __post_init__(self):
        if self.base_rate <= 0.0:
            raise ValueError("base_rate must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")
        if self.start_epoch < 0:
            raise ValueError("start_epoch must be >= 0")

    def rate_at(self, epoch: int) -> float:
        if epoch < self.start_epoch or self.decay_factor == 1.0:
            return self.base_rate
        n_decays = (epoch - self.start_epoch) // self.decay_interval + 1
        return self.base_rate * self.decay_factor ** n_decays


class AdamState:
    """Per-parameter first/second moment accumulators plus the step counter.

    The schedule lives here so the effective rate is a pure function of the
    recorded epoch; the trainer advances ``epoch`` between epochs.
    """

    def __init__(self, params: Mapping[str, np.ndarray], schedule: LrSchedule,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        self.m = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.step_count = 0
        self.epoch = 0
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def effective_rate(self) -> float:
        return self.schedule.rate_at(self.epoch)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, batch_id: object = None) -> dict[str, np.ndarray]:
    """One Adam update; returns new parameter arrays and mutates ``state``.

    Rejects the step (without touching the state) when any gradient is
    non-finite or has the wrong shape.
    """
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {p.shape}"
            )
        if g.size and not math.isfinite(float(g.sum())):
            where = "" if batch_id is None else f" (batch {batch_id})"
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}{where}")

    state.step_count += 1
    t = state.step_count
    lr = state.effective_rate()
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_params
