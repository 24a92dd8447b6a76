"""Linear variance schedule. Arrays are stored 0-based; timestep t lives at index t - 1."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 40
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def lookup(self, t):
        return lookup(self, t)

    def check_t(self, t):
        if not (isinstance(t, (int, np.integer)) and 1 <= t <= self.T):
            raise ValueError(f"timestep must be an integer in [1, {self.T}], got {t!r}")
        return int(t)

    def alpha_bar_prev(self, t):
        """alpha_bar at t - 1, with alpha_bar[0] = 1."""
        t = self.check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and self.params() == other.params()

    def __hash__(self):
        return hash(tuple(self.params().values()))


def make_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start], dtype=np.float64)
    beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for a in (beta, alpha, alpha_bar, sigma):
        a.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, sigma)


def lookup(sched, t):
    """(beta, alpha, alpha_bar, sigma) at timestep ``t`` (1-based)."""
    i = sched.check_t(t) - 1
    return float(sched.beta[i]), float(sched.alpha[i]), float(sched.alpha_bar[i]), float(sched.sigma[i])


def matched_timestep(sched, sigma, t_max=None):
    """Timestep whose forward-noise variance 1 - alpha_bar_t is closest to sigma^2 / 2.

    sigma^2 / 2 is the per-quadrature variance of Rician noise with parameter sigma,
    so this is the diffusion step the observed image most resembles.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    t_max = sched.T if t_max is None else sched.check_t(t_max)
    gap = np.abs((1.0 - sched.alpha_bar[:t_max]) - sigma * sigma / 2.0)
    return int(np.argmin(gap)) + 1
