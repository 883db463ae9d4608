"""Closed-form mathematics of the variance-preserving diffusion process.

The forward SDE is ``dX = -0.5 * beta(t) * X dt + sqrt(beta(t)) dW`` on
``t in [0, 1]`` with a linear noise rate. Corruption always uses the exact
marginal; the SDE is never path-simulated.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, ContractViolation, DataError

DEFAULT_BETA0 = 0.05
DEFAULT_BETA1 = 20.0
DEFAULT_T_MIN = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear noise rate ``beta(t) = beta0 + t * (beta1 - beta0)``."""

    beta0: float = DEFAULT_BETA0
    beta1: float = DEFAULT_BETA1
    t_min: float = DEFAULT_T_MIN

    def __post_init__(self):
        if not (0.0 < self.beta0 < self.beta1):
            raise ConfigurationError(
                f"noise schedule needs 0 < beta0 < beta1, got ({self.beta0}, {self.beta1})"
            )
        if not (0.0 <= self.t_min < 1.0):
            raise ConfigurationError(f"t_min must lie in [0, 1), got {self.t_min}")

    @property
    def T(self):
        return 1.0

    def integral(self, t):
        """``int_0^t beta(s) ds``."""
        t = _check_time(t)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def beta(self, t):
        return beta_at(self, t)

    def lam(self, t):
        return lambda_at(self, t)


def _check_time(t, lower=0.0):
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < lower) or np.any(arr > 1.0):
        raise DataError(f"diffusion time must lie in [{lower}, 1], got {t!r}")
    return arr if arr.ndim else float(arr)


def beta_at(sched, t):
    """Noise rate at time ``t`` (scalar or array)."""
    t = _check_time(t)
    return sched.beta0 + t * (sched.beta1 - sched.beta0)


def lambda_at(sched, t):
    """Marginal noise variance ``1 - exp(-int_0^t beta)``.

    ``-expm1`` keeps precision for small ``t`` where the variance is tiny.
    """
    return -np.expm1(-sched.integral(t))


def forward_sample(x0, t, eps, sched):
    """Draw ``X_t`` from the exact forward marginal given ``X_0`` and noise ``eps``.

    Works on numpy arrays and torch tensors alike (``t`` may be a scalar or
    a per-row array broadcastable against ``x0``).
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ContractViolation(
            f"eps shape {tuple(np.shape(eps))} does not match x0 shape {tuple(np.shape(x0))}"
        )
    lam = lambda_at(sched, t)
    return np.sqrt(1.0 - lam) * x0 + np.sqrt(lam) * eps


def reverse_step(x_t, t, score, z, n_steps, sched):
    """One step of the discretised reverse SDE on a grid of ``n_steps`` steps.

    Returns ``x_t + (beta_t/N) * (x_t/2 + score) + sqrt(beta_t/N) * z``.
    Pass ``z = 0`` for a deterministic (noiseless) step.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise ContractViolation(f"number of steps must be a positive integer, got {n_steps}")
    shape = np.shape(x_t)
    if np.shape(score) != shape or (np.ndim(z) and np.shape(z) != shape):
        raise ContractViolation("x_t, score and z must share one shape")
    t = _check_time(t)
    if np.any(np.asarray(t) <= 0.0):
        raise DataError("reverse steps are defined for t in (0, 1]")
    h = beta_at(sched, t) / n_steps
    return x_t + h * (0.5 * x_t + score) + np.sqrt(h) * z


def sample_times(rng, n, sched):
    """Uniform training times on ``[t_min, 1]``."""
    return rng.uniform(sched.t_min, 1.0, size=n)


def time_grid(n_steps):
    """Reverse-sampling times ``1, 1 - 1/N, ..., 1/N``."""
    if int(n_steps) != n_steps or n_steps < 1:
        raise ContractViolation(f"number of steps must be a positive integer, got {n_steps}")
    return 1.0 - np.arange(n_steps) / n_steps
