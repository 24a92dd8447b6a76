"""Experiment stages: baseline CNN, DDPM, conversion net, evaluation."""
from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from .. import numcore
from ..diffusion import DdpmModel, ddpm_denoise_from, ddpm_train_step, predict
from ..metrics import BRISQUE_FEATURE_NAMES, brisque_features, psnr, ssim
from ..numcore import AdamState, Net, NetSpec, NonFiniteError
from ..rddpm import (
    ConversionNet, RddpmModel, RddpmTrainConfig, SubtractOracle, conversion_mse, rddpm_denoise, rddpm_train_step,
)
from ..schedule import make_schedule, matched_timestep
from .checkpoint import Checkpoint, save_checkpoint
from .config import dump_config
from .imageio import atomic_write_bytes, write_f64, write_pgm16
from .phantoms import PhantomSpec, generate_phantom_dataset, load_split, read_manifest

log = logging.getLogger(__name__)

STAGES = {"baseline": 1, "ddpm": 2, "theta": 3, "eval": 4, "heldout": 5}
METHODS = ("noisy", "baseline", "ddpm", "rddpm")


class TrainingDiverged(RuntimeError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass


def stage_rng(cfg, stage, *extra):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, STAGES[stage], *extra]))


def build_schedule(cfg):
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def schedule_params(cfg):
    return {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end}


def net_spec(cfg, kind):
    if kind == "baseline":
        return NetSpec(cfg.channels(), time_embed_dim=0, residual=True)
    if kind == "ddpm":
        return NetSpec(cfg.channels(), time_embed_dim=cfg.time_embed_dim, residual=False)
    if kind == "theta":
        # noise-scaled: zero head = subtraction oracle; direct: identity skip, zero head = identity
        return NetSpec(cfg.channels(), time_embed_dim=cfg.time_embed_dim, residual=cfg.theta_param == "direct")
    raise ValueError(kind)


def phantom_spec(cfg):
    return PhantomSpec(cfg.size, cfg.shapes_min, cfg.shapes_max, cfg.intensity_min, cfg.intensity_max, cfg.seed)


def synth(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = generate_phantom_dataset(out, phantom_spec(cfg), cfg.n_train, cfg.n_test, cfg.sigma,
                                    cfg.noise_field or None)
    write_config_echo(cfg, out)
    return rows


def write_config_echo(cfg, out_dir, name="config.txt"):
    atomic_write_bytes(Path(out_dir) / name, dump_config(cfg).encode())


def random_crops(stacks, patch, batch, rng):
    """Same random (image, y, x) crops taken from every stack in ``stacks``."""
    n, h, w = stacks[0].shape
    idx = rng.integers(0, n, size=batch)
    ys = rng.integers(0, h - patch + 1, size=batch)
    xs = rng.integers(0, w - patch + 1, size=batch)
    return [np.stack([s[i, y:y + patch, x:x + patch] for i, y, x in zip(idx, ys, xs)]) for s in stacks]


def _write_log(path, header, rows):
    if path is None:
        return
    lines = [",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return str(v)


def _modes(cfg):
    return {"reverse_coef": cfg.reverse_coef, "renoise_scale": cfg.renoise_scale, "inner_step": cfg.inner_step,
            "theta_param": cfg.theta_param}


def train_baseline(cfg, data_dir, ckpt_path=None, log_path=None):
    """Noisy -> clean residual CNN with MSE loss on random crops."""
    clean, noisy = load_split(data_dir, "train")
    rng = stage_rng(cfg, "baseline")
    net = Net.init(net_spec(cfg, "baseline"), rng)
    opt = AdamState.fresh(net.params, lr=cfg.baseline_lr)
    steps_per_epoch = max(1, math.ceil(len(clean) / cfg.baseline_batch))
    history, step, loss = [], 0, float("nan")
    for epoch in range(cfg.baseline_epochs):
        losses = []
        for _ in range(steps_per_epoch):
            x, y = random_crops([noisy, clean], cfg.patch, cfg.baseline_batch, rng)
            try:
                new_net, opt, loss = numcore.train_step(net, opt, x[:, None], 1, y[:, None])
                if not math.isfinite(loss):
                    raise NonFiniteError(f"non-finite baseline loss at epoch {epoch}")
            except NonFiniteError as e:
                _abort(cfg, "baseline", net, step, history, ckpt_path, log_path, e)
            net = new_net
            losses.append(loss)
            step += 1
        history.append((epoch, float(np.mean(losses))))
        log.debug("baseline epoch %d loss %.6g", epoch, history[-1][1])
    _write_log(log_path, ("epoch", "loss"), history)
    ckpt = Checkpoint("baseline", net, None, {"steps": step, "final_loss": history[-1][1] if history else None,
                                              "seed": cfg.seed})
    if ckpt_path:
        save_checkpoint(ckpt_path, ckpt)
    return ckpt


def _abort(cfg, kind, net, step, history, ckpt_path, log_path, err):
    _write_log(log_path, ("epoch" if kind == "baseline" else "step", "loss"), history)
    if ckpt_path:
        sched = None if kind == "baseline" else schedule_params(cfg)
        save_checkpoint(ckpt_path, Checkpoint(kind, net, sched, {"steps": step, "aborted": str(err),
                                                                 "seed": cfg.seed, **_modes(cfg)}))
    raise TrainingDiverged(f"{kind} training diverged after {step} steps: {err}") from err


def apply_baseline(baseline, images):
    net = baseline.net if isinstance(baseline, Checkpoint) else baseline
    return predict(net, np.asarray(images, dtype=np.float64), 1)


def diffusion_x0(baseline, noisy):
    """Baseline outputs on the noisy images, emitted as [0, 1] images."""
    return np.clip(apply_baseline(baseline, noisy), 0.0, 1.0)


def train_diffusion(cfg, data_dir, baseline, ckpt_path=None, log_path=None):
    _, noisy = load_split(data_dir, "train")
    x0 = diffusion_x0(baseline, noisy)
    rng = stage_rng(cfg, "ddpm")
    sched = build_schedule(cfg)
    model = DdpmModel(Net.init(net_spec(cfg, "ddpm"), rng), sched)
    opt = AdamState.fresh(model.net.params, lr=cfg.ddpm_lr)
    history = []
    for step in range(cfg.ddpm_steps):
        (batch,) = random_crops([x0], cfg.patch, cfg.ddpm_batch, rng)
        try:
            loss, model, opt = ddpm_train_step(model, opt, batch, rng)
        except NonFiniteError as e:
            _abort(cfg, "ddpm", model.net, step, history, ckpt_path, log_path, e)
        history.append((step, loss))
    _write_log(log_path, ("step", "loss"), history)
    ckpt = Checkpoint("ddpm", model.net, schedule_params(cfg),
                      {"steps": cfg.ddpm_steps, "final_loss": history[-1][1] if history else None,
                       "seed": cfg.seed, **_modes(cfg)})
    if ckpt_path:
        save_checkpoint(ckpt_path, ckpt)
    return ckpt


def theta_config(cfg):
    return RddpmTrainConfig(T_m=cfg.t_m, p_i=cfg.p_i, lr=cfg.theta_lr, batch_size=cfg.theta_batch,
                            outer_iters=cfg.theta_outer, inner_step=cfg.inner_step)


def train_rddpm_theta(cfg, data_dir, baseline, ckpt_path=None, log_path=None):
    _, noisy = load_split(data_dir, "train")
    x0 = diffusion_x0(baseline, noisy)
    rng = stage_rng(cfg, "theta")
    sched = build_schedule(cfg)
    tcfg = theta_config(cfg).validate(sched)
    theta = ConversionNet(Net.init(net_spec(cfg, "theta"), rng), sched, cfg.theta_param)
    opt = AdamState.fresh(theta.params, lr=tcfg.lr)
    history = []
    for it in range(tcfg.outer_iters):
        (batch,) = random_crops([x0], cfg.patch, tcfg.batch_size, rng)
        try:
            loss, theta, opt = rddpm_train_step(theta, opt, batch, tcfg, sched, rng)
        except NonFiniteError as e:
            _abort(cfg, "theta", theta.net, opt.k, history, ckpt_path, log_path, e)
        history.append((it, loss))
    _write_log(log_path, ("outer_iter", "loss"), history)
    ckpt = Checkpoint("theta", theta.net, schedule_params(cfg),
                      {"steps": opt.k, "outer_iters": tcfg.outer_iters, "t_m": tcfg.T_m, "p_i": tcfg.p_i,
                       "final_loss": history[-1][1] if history else None, "seed": cfg.seed, **_modes(cfg)})
    if ckpt_path:
        save_checkpoint(ckpt_path, ckpt)
    return ckpt


def theta_heldout(cfg, data_dir, baseline, theta, draws=1):
    """Held-out conversion MSE of the trained net and of the subtraction oracle on shared draws."""
    _, noisy = load_split(data_dir, "test")
    x0 = diffusion_x0(baseline, noisy)
    sched = build_schedule(cfg)
    net = conversion_net(theta) if isinstance(theta, Checkpoint) else theta
    return conversion_mse({"theta": net, "oracle": SubtractOracle(sched)}, x0, sched, cfg.t_m,
                          stage_rng(cfg, "heldout"), draws=draws)


def conversion_net(ckpt):
    """The conversion model stored in a theta checkpoint, with its recorded parametrization."""
    return ConversionNet(ckpt.net, ckpt.make_schedule(), ckpt.metadata["theta_param"])


def ddpm_model(ckpt):
    return DdpmModel(ckpt.net, ckpt.make_schedule())


def rddpm_model(cfg, ddpm_ckpt, theta_ckpt):
    if ddpm_ckpt.schedule != theta_ckpt.schedule:
        raise ValueError("DDPM and conversion checkpoints were trained with different schedules")
    return RddpmModel(conversion_net(theta_ckpt), ddpm_model(ddpm_ckpt), T_m=theta_ckpt.metadata.get("t_m", cfg.t_m))


def start_timestep(cfg):
    """``cfg.t0``, or the noise-matched step when it is 0."""
    if cfg.t0:
        return cfg.t0
    return matched_timestep(build_schedule(cfg), cfg.sigma, cfg.t_m)


def denoise(cfg, method, noisy, rng, baseline=None, ddpm=None, theta=None):
    """Denoise one magnitude image with ``method``; output clipped to [0, 1]."""
    if method == "noisy":
        return np.clip(noisy, 0.0, 1.0)
    if method == "baseline":
        return np.clip(apply_baseline(baseline, noisy), 0.0, 1.0)
    if method == "ddpm":
        return ddpm_denoise_from(ddpm_model(ddpm), noisy, start_timestep(cfg), rng, mode=cfg.reverse_coef)
    if method == "rddpm":
        return rddpm_denoise(rddpm_model(cfg, ddpm, theta), noisy, start_timestep(cfg), rng,
                             reverse_mode=cfg.reverse_coef, renoise=cfg.renoise_scale)
    raise ValueError(f"unknown method {method!r}")


REPORT_HEADER = ("image", "method", "psnr", "ssim") + BRISQUE_FEATURE_NAMES


def evaluate(cfg, data_dir, checkpoints, out_dir, methods=METHODS):
    """Per-image PSNR/SSIM/BRISQUE-feature rows for each method plus per-method mean rows.

    Writes ``report.csv``, denoised images under ``images/`` and a config echo.
    Returns the rows (dicts) in file order.
    """
    needed = {"baseline": ["baseline"], "ddpm": ["ddpm"], "rddpm": ["ddpm", "theta"]}
    missing = sorted({k for m in methods for k in needed.get(m, []) if checkpoints.get(k) is None})
    if missing:
        raise MissingCheckpointError(f"missing checkpoint(s): {', '.join(missing)}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    test_rows = [r for r in read_manifest(data_dir) if r["split"] == "test"]
    clean, noisy = load_split(data_dir, "test")
    rows = []
    for row, c, n in zip(test_rows, clean, noisy):
        for mi, method in enumerate(methods):
            rng = stage_rng(cfg, "eval", row["index"], mi)
            img = denoise(cfg, method, n, rng, checkpoints.get("baseline"), checkpoints.get("ddpm"),
                          checkpoints.get("theta"))
            stem = f"{method}_{row['index']:04d}"
            write_f64(out / "images" / f"{stem}.f64", img)
            write_pgm16(out / "images" / f"{stem}.pgm", img)
            feats = brisque_features(img)
            rows.append({"image": str(row["index"]), "method": method, "psnr": psnr(c, img),
                         "ssim": ssim(c, img), **dict(zip(BRISQUE_FEATURE_NAMES, map(float, feats)))})
    for method in methods:
        sel = [r for r in rows if r["method"] == method]
        rows.append({"image": "mean", "method": method,
                     **{k: float(np.mean([r[k] for r in sel])) for k in REPORT_HEADER[2:]}})
    lines = [",".join(REPORT_HEADER)] + [",".join(_fmt(r[k]) for k in REPORT_HEADER) for r in rows]
    atomic_write_bytes(out / "report.csv", ("\n".join(lines) + "\n").encode())
    write_config_echo(cfg, out)
    return rows


def summary(rows):
    return {r["method"]: r for r in rows if r["image"] == "mean"}


def run_experiment(cfg, out_dir):
    """synth -> baseline -> DDPM -> conversion net -> evaluate, all under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    synth(cfg, data)
    baseline = train_baseline(cfg, data, out / "baseline.ckpt", out / "baseline_loss.csv")
    ddpm = train_diffusion(cfg, data, baseline, out / "ddpm.ckpt", out / "ddpm_loss.csv")
    theta = train_rddpm_theta(cfg, data, baseline, out / "theta.ckpt", out / "theta_loss.csv")
    rows = evaluate(cfg, data, {"baseline": baseline, "ddpm": ddpm, "theta": theta}, out / "eval")
    write_config_echo(cfg, out)
    return {"baseline": baseline, "ddpm": ddpm, "theta": theta, "rows": rows}
