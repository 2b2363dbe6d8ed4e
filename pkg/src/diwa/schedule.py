"""Linear variance schedule with 1-based step indexing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["NoiseSchedule", "build_linear_schedule", "gamma_at"]

DEFAULT_BETA_START = 1e-6
DEFAULT_BETA_END = 1e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step ``beta``, ``alpha = 1 - beta`` and ``gamma = cumprod(alpha)``.

    Arrays are 0-based storage for steps ``t = 1..T``; use :meth:`alpha_at`
    and friends for 1-based access.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    beta_start: float
    beta_end: float

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"step t={t} outside 1..{self.T}")
        return t - 1

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check(t)])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check(t)])

    def gamma_at(self, t: int) -> float:
        return float(self.gamma[self._check(t)])


def build_linear_schedule(
    T: int, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    T = int(T)
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        frac = np.arange(T, dtype=np.float64) / (T - 1)
        beta = beta_start + frac * (beta_end - beta_start)
    alpha = 1.0 - beta
    # sequential product keeps gamma[t] == gamma[t-1] * alpha[t] exactly
    gamma = np.empty(T)
    acc = 1.0
    for i, a in enumerate(alpha):
        acc *= a
        gamma[i] = acc
    for arr in (beta, alpha, gamma):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, gamma, float(beta_start), float(beta_end))


def gamma_at(schedule: NoiseSchedule, t: int) -> float:
    return schedule.gamma_at(t)
