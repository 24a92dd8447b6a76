import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_mse, mscn_patch_monte_carlo, windowed_ssim
from riciandiff.metrics import (
    BRISQUE_FEATURE_NAMES, PSNR_INF, BrisqueError, SsimConfig, aggd_fit, brisque_features, downsample2,
    gaussian_window, mscn, psnr, ssim,
)

UNIFORM = SsimConfig(window="uniform")
C1, C2 = 0.01 ** 2, 0.03 ** 2
images = arrays(np.float64, (12, 12), elements=st.floats(0, 1))


def test_psnr_identical_is_infinite(rng):
    a = rng.uniform(0, 1, (8, 8))
    assert psnr(a, a) == PSNR_INF == math.inf


def test_psnr_uniform_error():
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_brute_force(rng):
    a, b = rng.uniform(0, 1, (2, 64, 64))
    assert abs(psnr(a, b) - 10 * math.log10(1 / brute_force_mse(a, b))) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


@given(images, images)
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_windows_sum_to_one():
    assert SsimConfig().weights().shape == (11, 11)
    assert SsimConfig().weights().sum() == pytest.approx(1, abs=1e-15)
    assert UNIFORM.weights().sum() == pytest.approx(1, abs=1e-15)


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 1, (20, 20))
    assert ssim(a, a) == 1.0
    assert ssim(a, a, UNIFORM) == 1.0


@pytest.mark.parametrize("c, d", [(0.2, 0.1), (0.5, -0.3), (0.0, 1.0)])
def test_ssim_constant_images_closed_form(c, d):
    got = ssim(np.full((16, 16), c), np.full((16, 16), c + d), UNIFORM)
    assert got == pytest.approx((2 * c * (c + d) + C1) / (c * c + (c + d) ** 2 + C1), rel=1e-12)


@pytest.mark.parametrize("cfg", [UNIFORM, SsimConfig()])
def test_ssim_matches_per_window_recomputation(cfg, rng):
    a, b = rng.uniform(0, 1, (2, 16, 16))
    assert abs(ssim(a, b, cfg) - windowed_ssim(a, b, cfg.weights(), C1, C2)) < 1e-9


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b, UNIFORM)
    assert s == pytest.approx(ssim(b, a, UNIFORM), abs=1e-12)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


def test_mscn_constant_is_zero():
    np.testing.assert_array_equal(mscn(np.full((16, 16), 0.4)), 0)


def test_mscn_white_noise_variance_matches_patch_oracle(rng):
    m = mscn(0.5 + 0.1 * rng.standard_normal((256, 256)))
    centre, _ = mscn_patch_monte_carlo(200_000, 0.1, rng)
    assert abs(m[8:-8, 8:-8].var() / centre.var() - 1) < 0.03


@pytest.mark.xfail(strict=True, reason="the centre pixel sits inside its own local mean and variance, "
                                       "so white noise gives a variance near 0.73, not 1")
def test_mscn_white_noise_unit_variance_naive_expectation(rng):
    m = mscn(0.5 + 0.1 * rng.standard_normal((256, 256)))
    assert abs(m[8:-8, 8:-8].var() - 1) < 0.1


def test_mscn_approximate_contrast_invariance(rng):
    img = 0.5 + 0.2 * rng.standard_normal((128, 128))
    a, b = mscn(img), mscn(0.5 * img)
    assert np.abs(b - a).mean() / np.abs(a).mean() < 0.02


def test_mscn_matches_definition_at_interior_pixel(rng):
    img = rng.uniform(0, 1, (20, 20))
    w = gaussian_window(7, 7 / 6)
    patch = img[7:14, 7:14]
    mu = (w * patch).sum()
    sd = math.sqrt(abs((w * patch * patch).sum() - mu * mu))
    assert mscn(img)[10, 10] == pytest.approx((img[10, 10] - mu) / (sd + 1 / 255), rel=1e-10)


def test_aggd_gaussian(rng):
    p = aggd_fit(rng.standard_normal(10 ** 6))
    assert abs(p.alpha - 2) < 0.1
    assert abs(p.sigma_l / p.sigma_r - 1) < 0.02


def test_aggd_laplace(rng):
    assert abs(aggd_fit(rng.laplace(0, 1, 10 ** 6)).alpha - 1) < 0.1


def test_aggd_scale_equivariance(rng):
    x = rng.standard_normal(10 ** 4)
    p, q = aggd_fit(x), aggd_fit(3.5 * x)
    assert abs(q.alpha - p.alpha) <= 0.001 + 1e-12
    assert q.sigma_l == pytest.approx(3.5 * p.sigma_l, rel=1e-12)
    assert q.sigma_r == pytest.approx(3.5 * p.sigma_r, rel=1e-12)


def test_aggd_asymmetry_sign(rng):
    x = rng.standard_normal(10 ** 5)
    x[x > 0] *= 2
    p = aggd_fit(x)
    assert p.sigma_r > p.sigma_l and p.mean > 0


def test_aggd_errors():
    with pytest.raises(ValueError):
        aggd_fit(np.linspace(0.1, 1, 500))
    with pytest.raises(ValueError):
        aggd_fit([-1.0, 1.0] * 10)


def test_downsample_box_average():
    img = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(downsample2(img), [[2.5, 4.5], [10.5, 12.5]])


def test_brisque_shape_determinism(rng):
    img = rng.uniform(0, 1, (64, 64))
    a, b = brisque_features(img), brisque_features(img.copy())
    assert a.shape == (36,) == (len(BRISQUE_FEATURE_NAMES),)
    assert np.all(np.isfinite(a)) and a.tobytes() == b.tobytes()
    assert BRISQUE_FEATURE_NAMES[0] == "s0_mscn_alpha" and BRISQUE_FEATURE_NAMES[18] == "s1_mscn_alpha"


def noise_features(rng):
    return dict(zip(BRISQUE_FEATURE_NAMES, brisque_features(0.5 + 0.1 * rng.standard_normal((256, 256)))))


def test_brisque_noise_product_mean_matches_patch_oracle(rng):
    f = noise_features(rng)
    a, b = mscn_patch_monte_carlo(200_000, 0.1, rng)
    # overlapping normalisation windows make neighbouring coefficients slightly anti-correlated
    assert abs(f["s0_horizontal_mean"] - np.mean(a * b)) < 0.02
    assert f["s0_vertical_mean"] == pytest.approx(f["s0_horizontal_mean"], abs=0.01)
    assert all(-0.15 < f[f"s0_{d}_mean"] < 0 for d in ("diag", "antidiag"))


@pytest.mark.xfail(strict=True, reason="shared local windows bias neighbour products to about -0.1")
def test_brisque_noise_product_means_vanish_naive_expectation(rng):
    f = noise_features(rng)
    for d in ("horizontal", "vertical", "diag", "antidiag"):
        assert abs(f[f"s0_{d}_mean"]) < 0.02


def test_brisque_upsampled_scale_consistency():
    yy, xx = np.mgrid[0:96, 0:96] / 96
    img = 0.5 + 0.25 * np.sin(9 * xx + 3 * yy) * np.cos(7 * yy - 2 * xx) + 0.1 * np.sin(31 * xx * yy)
    full = brisque_features(img)[:18]
    half = brisque_features(np.kron(img, np.ones((2, 2))))[18:]
    big = np.abs(full) > 1e-3
    assert np.all(np.abs(half[big] - full[big]) / np.abs(full[big]) < 0.05)


def test_brisque_errors():
    with pytest.raises(BrisqueError, match="32"):
        brisque_features(np.zeros((16, 40)))
    with pytest.raises(BrisqueError, match="scale 0, MSCN"):
        brisque_features(np.full((40, 40), 0.3))
