"""Standard DDPM pieces: closed-form forward sampling, eps-prediction training,
ancestral reverse steps and partial-start denoising."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore
from .numcore import Net, NetSpec, NonFiniteError, ShapeError
from .schedule import NoiseSchedule, lookup

log = logging.getLogger(__name__)

REVERSE_MODES = ("standard", "paper")


@dataclass
class DdpmModel:
    net: Net
    sched: NoiseSchedule


def default_denoiser_spec():
    # no residual skip: a zero head must predict eps = 0, not eps = x_t
    return NetSpec(channels=(1, 32, 32, 32, 1), time_embed_dim=32, residual=False)


def to_batch(x):
    """(H, W) -> (1, 1, H, W); (B, H, W) -> (B, 1, H, W); 4-d passes through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def predict(net, x, t):
    """Run a net (or any object with ``forward(x, t)``) on an image of any leading shape."""
    x = np.asarray(x, dtype=np.float64)
    return net.forward(to_batch(x), t).reshape(x.shape)


def q_sample(x0, t, eps, sched):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` may be a scalar or one timestep per leading-axis item.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    if np.ndim(t) == 0:
        ab = lookup(sched, t)[2]
    else:
        t = np.asarray(t)
        for ti in t:
            sched.check_t(ti)
        ab = sched.alpha_bar[t - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_train_step(model, opt, x0_batch, rng):
    """One eps-prediction step. Returns (loss, updated model, updated optimizer state)."""
    x0 = to_batch(x0_batch)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    nb = x0.shape[0]
    t = rng.integers(1, model.sched.T + 1, size=nb)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, model.sched)
    loss, grads = model.net.loss_and_grads(x_t, t, eps)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite DDPM loss at timesteps {t.tolist()}")
    params, opt = numcore.adam_step(model.net.params, grads, opt)
    return loss, DdpmModel(model.net.with_params(params), model.sched), opt


def reverse_coefficient(sched, t, mode="standard"):
    _, alpha, alpha_bar, _ = lookup(sched, t)
    if mode == "standard":
        return 1.0 / np.sqrt(alpha)
    if mode == "paper":
        return 1.0 / np.sqrt(alpha_bar)
    raise ValueError(f"reverse mode must be one of {REVERSE_MODES}, got {mode!r}")


def reverse_mean(sched, x_t, t, eps_pred, mode="standard"):
    """Deterministic part of the reverse update."""
    _, alpha, alpha_bar, _ = lookup(sched, t)
    coef = reverse_coefficient(sched, t, mode)
    return coef * (x_t - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps_pred)


def reverse_step(model, x_t, t, z, mode="standard", eps_pred=None):
    """x_{t-1} from x_t; ``eps_pred`` overrides the network prediction."""
    x_t = np.asarray(x_t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x_t.shape:
        raise ShapeError(f"z shape {z.shape} != x_t shape {x_t.shape}")
    if eps_pred is None:
        eps_pred = predict(model.net, x_t, t)
    sigma = lookup(model.sched, t)[3]
    return reverse_mean(model.sched, x_t, t, eps_pred, mode) + sigma * z


def ddpm_denoise_from(model, x_start, T0, rng, mode="standard", clamp=True):
    """Treat ``x_start`` as x_{T0} and run the reverse chain down to x_0."""
    T0 = model.sched.check_t(T0)
    x = np.asarray(x_start, dtype=np.float64)
    for t in range(T0, 0, -1):
        z = rng.standard_normal(x.shape) if t != 1 else np.zeros_like(x)
        x = reverse_step(model, x, t, z, mode=mode)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state after reverse step t={t}")
    return np.clip(x, 0.0, 1.0) if clamp else x
