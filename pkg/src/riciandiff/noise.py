"""Rician magnitude noise and synthetic low-SNR image generation.

``sigma`` is always the *total* complex-noise scale: each quadrature component
gets standard deviation ``sigma / sqrt(2)``, so ``E[R**2] = S**2 + sigma**2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_image(x, name="image"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) == 0:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


@dataclass(frozen=True)
class RicianParams:
    sigma: float

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be finite and non-negative, got {self.sigma}")


@dataclass(frozen=True)
class GaussianSource:
    params: RicianParams


@dataclass(frozen=True)
class EmpiricalSource:
    """A signal-free noise field; crops of it serve as the quadrature noise."""

    field: np.ndarray
    allow_tiling: bool = True

    def __post_init__(self):
        f = as_image(self.field, "noise field")
        object.__setattr__(self, "field", f)


def _params(p):
    return p if isinstance(p, RicianParams) else RicianParams(float(p))


def rician_magnitude(signal, params, rng):
    """|S + n1 + i n2| with n1, n2 ~ N(0, sigma^2 / 2) drawn independently per pixel."""
    signal = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(signal)):
        raise ValueError("signal contains non-finite values")
    sigma = _params(params).sigma
    if sigma == 0:
        return np.abs(signal)
    comp = sigma / np.sqrt(2.0)
    n1 = rng.normal(0.0, comp, size=signal.shape)
    n2 = rng.normal(0.0, comp, size=signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2 ** 2)


def _random_crop(field, shape, rng):
    # circular offset plus random flips; wrap-around acts as tiling
    fh, fw = field.shape
    h, w = shape
    rows = (rng.integers(fh) + np.arange(h)) % fh
    cols = (rng.integers(fw) + np.arange(w)) % fw
    crop = field[np.ix_(rows, cols)]
    if rng.random() < 0.5:
        crop = crop[::-1, :]
    if rng.random() < 0.5:
        crop = crop[:, ::-1]
    return crop


def synth_sodium(t1w, source, rng):
    """Turn a clean [0, 1] image into a synthetic low-SNR magnitude image."""
    t1w = as_image(t1w, "t1w")
    if t1w.min() < 0 or t1w.max() > 1:
        raise ValueError("t1w intensities must lie in [0, 1]")
    if isinstance(source, (RicianParams, GaussianSource)) or np.isscalar(source):
        params = source.params if isinstance(source, GaussianSource) else _params(source)
        return rician_magnitude(t1w, params, rng)
    if not isinstance(source, EmpiricalSource):
        raise TypeError(f"unsupported noise source {type(source).__name__}")
    fh, fw = source.field.shape
    if (fh < t1w.shape[0] or fw < t1w.shape[1]) and not source.allow_tiling:
        raise ValueError(f"noise field {source.field.shape} is smaller than image {t1w.shape} and tiling is disabled")
    n_re = _random_crop(source.field, t1w.shape, rng)
    n_im = _random_crop(source.field, t1w.shape, rng)
    root2 = np.sqrt(2.0)
    return np.sqrt((t1w + n_re / root2) ** 2 + (n_im / root2) ** 2)


def estimate_moments(samples):
    """Unbiased sample mean and variance."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    return float(x.mean()), float(x.var(ddof=1))
