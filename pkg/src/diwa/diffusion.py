"""Forward noising, the refining step and the training/inference loops over residual sub-bands.

Random draw order (one ``numpy.random.Generator`` per call site):

* ``make_training_example``: for each batch element in index order, first the
  step ``t`` and then its noise ``eps`` (``standard_normal`` of one element's
  sub-band shape).
* ``sample``: first ``z_T`` for the whole batch, then one batch-shaped ``eps``
  per step for ``t = T .. 1``; the draw at ``t = 1`` is consumed even when the
  final step adds no noise, so toggling ``final_noise`` never shifts the stream.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule
from .tensor import ShapeError, Tensor, no_grad
from .wavelet import dwt2d, idwt2d

__all__ = [
    "DiffusionState",
    "TrainingExample",
    "forward_marginal_sample",
    "forward_step_sample",
    "posterior_mean",
    "reverse_step",
    "make_training_example",
    "sample",
    "to_domain",
    "from_domain",
]

Denoise = Callable[[Tensor, Tensor, np.ndarray], Tensor]
Predict = Callable[[Tensor], Tensor]


@dataclass
class DiffusionState:
    z: Tensor
    t: int


@dataclass
class TrainingExample:
    x_sub: Tensor  # conditioning sub-bands
    z_t: Tensor  # noisy residual, graph through g retained
    gamma: np.ndarray  # (B,)
    eps: np.ndarray  # same shape as z_t
    t: np.ndarray  # (B,) 1-based steps


def to_domain(image: Tensor, use_dwt: bool = True) -> Tensor:
    return dwt2d(image) if use_dwt else image


def from_domain(sub: Tensor, use_dwt: bool = True) -> Tensor:
    return idwt2d(sub) if use_dwt else sub


def _per_sample(values, ndim: int) -> np.ndarray | float:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        return float(v)
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _steps(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise IndexError(f"step t={t} outside 1..{schedule.T}")
    return t.astype(np.int64) - 1


def _check_same(op: str, a_shape, b_shape) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(op, "shape", tuple(b_shape), tuple(a_shape))


def forward_marginal_sample(z0: Tensor, t, schedule: NoiseSchedule, eps) -> Tensor:
    """sqrt(gamma_t) * z0 + sqrt(1 - gamma_t) * eps; ``t`` may be per-sample."""
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    _check_same("forward_marginal_sample", z0.shape, eps.shape)
    g = schedule.gamma[_steps(schedule, t)]
    return z0 * _per_sample(np.sqrt(g), z0.ndim) + Tensor(eps * _per_sample(np.sqrt(1.0 - g), z0.ndim))


def forward_step_sample(z_prev: Tensor, t, schedule: NoiseSchedule, eps) -> Tensor:
    """One Markov noising step: sqrt(alpha_t) * z_prev + sqrt(1 - alpha_t) * eps."""
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    _check_same("forward_step_sample", z_prev.shape, eps.shape)
    a = schedule.alpha[_steps(schedule, t)]
    return z_prev * _per_sample(np.sqrt(a), z_prev.ndim) + Tensor(eps * _per_sample(np.sqrt(1.0 - a), z_prev.ndim))


def posterior_mean(z_t: Tensor, t, schedule: NoiseSchedule, f_out: Tensor) -> Tensor:
    """Mean of the reverse step given the predicted noise ``f_out``."""
    _check_same("posterior_mean", z_t.shape, f_out.shape)
    i = _steps(schedule, t)
    a, g = schedule.alpha[i], schedule.gamma[i]
    nd = z_t.ndim
    return (z_t - f_out * _per_sample((1.0 - a) / np.sqrt(1.0 - g), nd)) * _per_sample(1.0 / np.sqrt(a), nd)


def reverse_step(
    x_cond: Tensor,
    z_t: Tensor,
    t: int,
    schedule: NoiseSchedule,
    f_theta: Denoise,
    eps,
    add_noise: bool = True,
) -> Tensor:
    """z_{t-1} from z_t. No noise is ever added at ``t = 1``."""
    if not 1 <= t <= schedule.T:
        raise IndexError(f"step t={t} outside 1..{schedule.T}")
    gamma = np.full(z_t.shape[0], schedule.gamma_at(t))
    f_out = f_theta(x_cond, z_t, gamma)
    mean = posterior_mean(z_t, t, schedule, f_out)
    if add_noise and t > 1:
        eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
        _check_same("reverse_step", z_t.shape, eps.shape)
        return mean + Tensor(np.sqrt(schedule.beta_at(t)) * eps)
    return mean


def make_training_example(
    x: Tensor,
    y: Tensor,
    schedule: NoiseSchedule,
    g_theta: Predict,
    rng: np.random.Generator,
    use_dwt: bool = True,
) -> TrainingExample:
    """Residual noising of one batch: z_t = sqrt(g)(y_sub - g(x_sub)) + sqrt(1-g) eps.

    ``x`` is the upsampled LR image with the same shape as ``y``.
    """
    if x.shape != y.shape:
        raise ShapeError("make_training_example", "spatial", x.shape, y.shape)
    x_sub = to_domain(x, use_dwt)
    y_sub = to_domain(y, use_dwt)
    B = x_sub.shape[0]
    per = x_sub.shape[1:]
    t = np.empty(B, dtype=np.int64)
    eps = np.empty(x_sub.shape)
    for b in range(B):
        t[b] = rng.integers(1, schedule.T + 1)
        eps[b] = rng.standard_normal(per)
    residual = y_sub - g_theta(x_sub)
    z_t = forward_marginal_sample(residual, t, schedule, eps)
    return TrainingExample(x_sub, z_t, schedule.gamma[t - 1].copy(), eps, t)


def sample(
    x: Tensor,
    schedule: NoiseSchedule,
    f_theta: Denoise,
    g_theta: Predict,
    seed,
    use_dwt: bool = True,
    final_noise: bool = False,
    trained_T: int | None = None,
) -> Tensor:
    """Run ``T`` refinement steps from pure noise and return the SR image.

    ``final_noise=True`` also adds noise at ``t = 1`` (the literal refining
    step); by default the last step returns the posterior mean.
    """
    if trained_T is not None and trained_T != schedule.T:
        warnings.warn(
            f"sampling with T={schedule.T}, checkpoint was trained with T={trained_T}",
            stacklevel=2,
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    with no_grad():
        x_sub = to_domain(x, use_dwt)
        x_init = g_theta(x_sub)
        z = Tensor(rng.standard_normal(x_sub.shape))
        for t in range(schedule.T, 0, -1):
            eps = rng.standard_normal(x_sub.shape)
            z = reverse_step(x_sub, z, t, schedule, f_theta, eps, add_noise=True)
            if t == 1 and final_noise:
                z = z + Tensor(np.sqrt(schedule.beta_at(1)) * eps)
        return from_domain(x_init + z, use_dwt)
