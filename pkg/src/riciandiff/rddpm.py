"""Rician-aware diffusion: a squared-domain conversion net interleaved with a frozen DDPM.

At every reverse timestep the magnitude image ``A_t`` is squared, mapped by the
conversion net ``theta`` to an estimate of the squared Gaussian-track image
``x_t**2``, square-rooted, and handed to the frozen eps-prediction net for one
reverse update. The magnitude track is then rebuilt from the re-noised
Gaussian track.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore
from .diffusion import DdpmModel, predict, q_sample, reverse_mean, to_batch
from .numcore import Net, NetSpec, NonFiniteError
from .schedule import lookup

log = logging.getLogger(__name__)

RENOISE_MODES = ("paper", "consistent")
INNER_STEP_MODES = ("per-sample", "literal")
THETA_PARAMS = ("noise-scaled", "direct")


def default_theta_spec(param="noise-scaled"):
    """Conversion-net shape; a zero output head then means "subtract the noise power" or "identity"."""
    if param not in THETA_PARAMS:
        raise ValueError(f"param must be one of {THETA_PARAMS}, got {param!r}")
    return NetSpec(channels=(1, 32, 32, 32, 1), time_embed_dim=32, residual=param == "direct")


def _noise_power(sched, t, ndim):
    """1 - alpha_bar_t, per item for array ``t``, shaped to broadcast over a batch."""
    t = np.asarray(t).reshape(-1)
    for ti in t:
        sched.check_t(ti)
    s2 = 1.0 - sched.alpha_bar[t - 1]
    return s2.reshape((-1,) + (1,) * (ndim - 1)) if t.size > 1 else float(s2[0])


@dataclass
class ConversionNet:
    """The conversion model theta(A_t**2, t) built around a plain :class:`Net`.

    ``"direct"``: theta = net(A**2, t).
    ``"noise-scaled"``: theta = A**2 - s_t + s_t * net(A**2, t) with s_t = 1 - alpha_bar_t.
    The net then predicts a correction in units of the noise power. A zero net is the
    subtraction oracle, and the error shrinks with the noise at small t. The training
    loss is the same squared-domain MSE in both cases.
    """

    net: Net
    sched: object
    param: str = "noise-scaled"

    def __post_init__(self):
        if self.param not in THETA_PARAMS:
            raise ValueError(f"param must be one of {THETA_PARAMS}, got {self.param!r}")

    @property
    def params(self):
        return self.net.params

    def with_params(self, params):
        return ConversionNet(self.net.with_params(params), self.sched, self.param)

    def forward(self, A_sq, t=1):
        y = self.net.forward(A_sq, t)
        if self.param == "direct":
            return y
        s2 = _noise_power(self.sched, t, y.ndim)
        return np.asarray(A_sq, dtype=np.float64).reshape(y.shape) - s2 + s2 * y

    __call__ = forward

    def loss_and_grads(self, A_sq, t, target, weight=None):
        if self.param == "direct":
            return self.net.loss_and_grads(A_sq, t, target, weight)
        A_sq = to_batch(A_sq)
        s2 = _noise_power(self.sched, t, A_sq.ndim)
        # (A - s + s y - target)^2 = s^2 (y - z)^2 with z = (target - A + s) / s
        z = (to_batch(target) - A_sq + s2) / s2
        w = s2 * s2 if weight is None else weight * s2 * s2
        return self.net.loss_and_grads(A_sq, t, z, w)


@dataclass(frozen=True)
class RddpmTrainConfig:
    T_m: int = 40
    p_i: int = 50
    lr: float = 2e-4
    batch_size: int = 8
    outer_iters: int = 1000
    inner_step: str = "per-sample"

    def validate(self, sched):
        if not 1 <= self.T_m <= sched.T:
            raise ValueError(f"T_m must lie in [1, {sched.T}], got {self.T_m}")
        if self.p_i < 1:
            raise ValueError(f"p_i must be >= 1, got {self.p_i}")
        if self.inner_step not in INNER_STEP_MODES:
            raise ValueError(f"inner_step must be one of {INNER_STEP_MODES}, got {self.inner_step!r}")
        return self


@dataclass
class RddpmModel:
    theta: ConversionNet
    ddpm: DdpmModel
    T_m: int | None = None

    def __post_init__(self):
        if self.T_m is None:
            self.T_m = self.ddpm.sched.T
        if not 1 <= self.T_m <= self.ddpm.sched.T:
            raise ValueError(f"T_m={self.T_m} outside the DDPM schedule length {self.ddpm.sched.T}")

    @property
    def sched(self):
        return self.ddpm.sched


class SubtractOracle:
    """Net-shaped wrapper around :func:`oracle_subtract`."""

    def __init__(self, sched):
        self.sched = sched

    def forward(self, x, t=1):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t).reshape(-1)
        if t.size == 1:
            return oracle_subtract(x, int(t[0]), self.sched)
        shift = 1.0 - self.sched.alpha_bar[t - 1]
        return x - shift.reshape((-1,) + (1,) * (x.ndim - 1))

    __call__ = forward


def oracle_subtract(A_sq, t, sched):
    """Analytic unbiased estimate of x_t**2: A_t**2 - (1 - alpha_bar_t)."""
    return np.asarray(A_sq, dtype=np.float64) - (1.0 - lookup(sched, t)[2])


def make_rician_magnitude_at(x_t, t, sched, rng):
    """sqrt(x_t**2 + (sqrt(1 - alpha_bar_t) eps)**2) with fresh eps; ``t`` scalar or per item."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if np.ndim(t) == 0:
        scale = np.sqrt(1.0 - lookup(sched, t)[2])
    else:
        t = np.asarray(t)
        for ti in t:
            sched.check_t(ti)
        scale = np.sqrt(1.0 - sched.alpha_bar[t - 1]).reshape((-1,) + (1,) * (x_t.ndim - 1))
    eps = rng.standard_normal(x_t.shape)
    return np.sqrt(x_t ** 2 + (scale * eps) ** 2)


def rddpm_train_step(theta, opt, x0_batch, cfg, sched, rng):
    """One outer draw of x0, t and x_t followed by the inner magnitude resampling loop.

    Returns (last inner loss, updated theta, updated optimizer state).
    """
    x0 = to_batch(x0_batch)
    nb = x0.shape[0]
    t = rng.integers(1, cfg.T_m + 1, size=nb)
    x_t = q_sample(x0, t, rng.standard_normal(x0.shape), sched)
    target = x_t ** 2
    if cfg.inner_step == "per-sample":
        loss = None
        for _ in range(cfg.p_i):
            A_t = make_rician_magnitude_at(x_t, t, sched, rng)
            loss, theta, opt = _theta_step(theta, opt, A_t ** 2, t, target)
        return loss, theta, opt
    if cfg.inner_step == "literal":
        for _ in range(cfg.p_i + 1):
            A_t = make_rician_magnitude_at(x_t, t, sched, rng)
        return _theta_step(theta, opt, A_t ** 2, t, target)
    raise ValueError(f"inner_step must be one of {INNER_STEP_MODES}, got {cfg.inner_step!r}")


def _theta_step(theta, opt, A_sq, t, target):
    loss, grads = theta.loss_and_grads(A_sq, t, target)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite conversion loss at timesteps {np.asarray(t).tolist()}")
    params, opt = numcore.adam_step(theta.params, grads, opt)
    return loss, theta.with_params(params), opt


def convert_rician_to_gaussian(theta, A_t, t):
    """x_hat_t = sqrt(max(theta(A_t**2, t), 0)); returns (x_hat_t, fraction of clamped pixels)."""
    A_t = np.asarray(A_t, dtype=np.float64)
    if np.any(A_t < 0):
        raise ValueError("magnitude image must be non-negative")
    s = predict(theta, A_t ** 2, t)
    negative = s < 0
    return np.sqrt(np.where(negative, 0.0, s)), float(negative.mean())


def rddpm_denoise(model, A_start, T0, rng, reverse_mode="standard", renoise="paper",
                  clamp=True, trace=None):
    """Denoise a magnitude image starting at timestep ``T0``.

    ``trace``, if a list, receives one dict per timestep with the magnitude
    image fed to the conversion net and the clamped-pixel fraction.
    """
    sched = model.sched
    T0 = sched.check_t(T0)
    if T0 > model.T_m:
        raise ValueError(f"T0={T0} exceeds the conversion net's training range T_m={model.T_m}")
    if renoise not in RENOISE_MODES:
        raise ValueError(f"renoise must be one of {RENOISE_MODES}, got {renoise!r}")
    A = np.asarray(A_start, dtype=np.float64)
    if np.any(A < 0) or not np.all(np.isfinite(A)):
        raise ValueError("A_start must be finite and non-negative")

    x = A
    for t in range(T0, 0, -1):
        x_hat, clamped = convert_rician_to_gaussian(model.theta, A, t)
        if trace is not None:
            trace.append({"t": t, "A": A, "clamped_fraction": clamped})
        eps_hat = predict(model.ddpm.net, x_hat, t)
        x = reverse_mean(sched, x_hat, t, eps_hat, reverse_mode)
        if t != 1:
            z_i = rng.standard_normal(x.shape)
            z_j = rng.standard_normal(x.shape)
            sigma = lookup(sched, t)[3]
            scale = sigma if renoise == "paper" else np.sqrt(1.0 - sched.alpha_bar_prev(t))
            x = x + sigma * z_i
            A = np.sqrt(x ** 2 + (scale * z_j) ** 2)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at timestep t={t}")
    return np.clip(x, 0.0, 1.0) if clamp else x


def conversion_mse(nets, x0_images, sched, T_m, rng, draws=1):
    """Mean ||x_t**2 - net(A_t**2, t)||^2 over t = 1..T_m for each net, on shared draws.

    ``nets`` maps a label to a net-like object. Every net sees identical x_t and
    A_t samples, so the figures are directly comparable.
    """
    x0 = to_batch(x0_images)
    totals = {k: 0.0 for k in nets}
    count = 0
    for t in range(1, T_m + 1):
        for _ in range(draws):
            x_t = q_sample(x0, t, rng.standard_normal(x0.shape), sched)
            A_sq = make_rician_magnitude_at(x_t, t, sched, rng) ** 2
            target = x_t ** 2
            for label, net in nets.items():
                err = net.forward(A_sq, t) - target
                totals[label] += float(np.mean(err * err))
            count += 1
    return {k: v / count for k, v in totals.items()}
