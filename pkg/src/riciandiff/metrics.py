"""Image quality metrics: PSNR, SSIM and the BRISQUE feature stage.

BRISQUE feature ordering (36 values, see ``BRISQUE_FEATURE_NAMES``): for scale
0 (full resolution) then scale 1 (2x2 box-averaged half resolution):

    mscn_alpha, mscn_var,
    then for each pairwise product in (horizontal, vertical, diag, antidiag):
        alpha, mean, sigma_l, sigma_r

``mscn_var`` is ``(sigma_l**2 + sigma_r**2) / 2`` of the MSCN fit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import gammaln

from .noise import as_image

PSNR_INF = math.inf

MSCN_C = 1.0 / 255.0
PAIR_DIRECTIONS = ("horizontal", "vertical", "diag", "antidiag")
BRISQUE_FEATURE_NAMES = tuple(
    f"s{scale}_{name}"
    for scale in (0, 1)
    for name in ["mscn_alpha", "mscn_var"]
    + [f"{d}_{k}" for d in PAIR_DIRECTIONS for k in ("alpha", "mean", "sigma_l", "sigma_r")]
)


class BrisqueError(ValueError):
    pass


def _pair(ref, test):
    ref, test = as_image(ref, "ref"), as_image(test, "test")
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test, data_range=1.0):
    """10 log10(L^2 / MSE) in dB; identical images give ``PSNR_INF``."""
    ref, test = _pair(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size, sd):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sd ** 2))
    w = np.outer(g, g)
    return w / w.sum()


@dataclass(frozen=True)
class SsimConfig:
    window: str = "gaussian"
    size: int | None = None
    sd: float = 1.5
    K1: float = 0.01
    K2: float = 0.03
    L: float = 1.0

    def weights(self):
        if self.window == "gaussian":
            return gaussian_window(self.size or 11, self.sd)
        if self.window == "uniform":
            n = self.size or 8
            return np.full((n, n), 1.0 / (n * n))
        raise ValueError(f"unknown SSIM window {self.window!r}")


def _window_mean(img, w):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)


def ssim(ref, test, cfg=SsimConfig()):
    """Mean SSIM over all fully-contained window positions."""
    ref, test = _pair(ref, test)
    w = cfg.weights()
    if ref.shape[0] < w.shape[0] or ref.shape[1] < w.shape[1]:
        raise ValueError(f"image {ref.shape} is smaller than the {w.shape} SSIM window")
    c1, c2 = (cfg.K1 * cfg.L) ** 2, (cfg.K2 * cfg.L) ** 2
    mu_a, mu_b = _window_mean(ref, w), _window_mean(test, w)
    var_a = _window_mean(ref * ref, w) - mu_a * mu_a
    var_b = _window_mean(test * test, w) - mu_b * mu_b
    cov = _window_mean(ref * test, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mscn(img, size=7, sd=7.0 / 6.0, C=MSCN_C):
    """Mean-subtracted contrast-normalised coefficients with reflective borders."""
    img = as_image(img)
    w = gaussian_window(size, sd)
    mu = ndimage.correlate(img, w, mode="reflect")
    var = ndimage.correlate(img * img, w, mode="reflect") - mu * mu
    return (img - mu) / (np.sqrt(np.abs(var)) + C)


_ALPHA_GRID = np.round(np.arange(0.2, 10.0 + 5e-4, 0.001), 6)
_RHO_GRID = np.exp(2 * gammaln(2 / _ALPHA_GRID) - gammaln(1 / _ALPHA_GRID) - gammaln(3 / _ALPHA_GRID))


@dataclass(frozen=True)
class AggdParams:
    alpha: float
    sigma_l: float
    sigma_r: float

    @property
    def mean(self):
        a = self.alpha
        return (self.sigma_r - self.sigma_l) * math.exp(
            math.lgamma(2 / a) - 0.5 * (math.lgamma(1 / a) + math.lgamma(3 / a)))


def aggd_fit(samples):
    """Moment-matching fit of an asymmetric generalised Gaussian (tabulated alpha grid)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise ValueError(f"need at least 100 samples, got {x.size}")
    left, right = x[x < 0], x[x > 0]
    if left.size == 0 or right.size == 0:
        raise ValueError("samples must contain both negative and positive values")
    sigma_l = math.sqrt(float(np.mean(left * left)))
    sigma_r = math.sqrt(float(np.mean(right * right)))
    gamma = sigma_l / sigma_r
    r_hat = float(np.mean(np.abs(x))) ** 2 / float(np.mean(x * x))
    R_hat = r_hat * (gamma ** 3 + 1) * (gamma + 1) / (gamma ** 2 + 1) ** 2
    alpha = float(_ALPHA_GRID[np.argmin(np.abs(_RHO_GRID - R_hat))])
    return AggdParams(alpha, sigma_l, sigma_r)


def _pair_products(m):
    return {
        "horizontal": m[:, :-1] * m[:, 1:],
        "vertical": m[:-1, :] * m[1:, :],
        "diag": m[:-1, :-1] * m[1:, 1:],
        "antidiag": m[1:, :-1] * m[:-1, 1:],
    }


def _scale_features(img, scale):
    m = mscn(img)
    try:
        p = aggd_fit(m)
    except ValueError as e:
        raise BrisqueError(f"scale {scale}, MSCN fit: {e}") from None
    feats = [p.alpha, (p.sigma_l ** 2 + p.sigma_r ** 2) / 2]
    for name, prod in _pair_products(m).items():
        try:
            q = aggd_fit(prod)
        except ValueError as e:
            raise BrisqueError(f"scale {scale}, {name} product fit: {e}") from None
        feats += [q.alpha, q.mean, q.sigma_l, q.sigma_r]
    return feats


def downsample2(img):
    """2x2 box average (odd trailing row/column dropped)."""
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def brisque_features(img):
    img = as_image(img)
    if min(img.shape) < 32:
        raise BrisqueError(f"image must be at least 32x32, got {img.shape}")
    if np.ptp(img) == 0:
        raise BrisqueError("scale 0, MSCN fit: constant image has no structure")
    return np.array(_scale_features(img, 0) + _scale_features(downsample2(img), 1))
