"""Experiment configuration: a flat dataclass read from ``key=value`` files.

Every field maps to a CLI flag by replacing ``_`` with ``-`` (``t_m`` is
``--t-m``), and config files may use either spelling. CLI values override the
file, which overrides the defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..diffusion import REVERSE_MODES
from ..rddpm import INNER_STEP_MODES, RENOISE_MODES, THETA_PARAMS

CHOICES = {
    "reverse_coef": REVERSE_MODES,
    "renoise_scale": RENOISE_MODES,
    "inner_step": INNER_STEP_MODES,
    "theta_param": THETA_PARAMS,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # dataset
    size: int = 64
    n_train: int = 32
    n_test: int = 20
    shapes_min: int = 2
    shapes_max: int = 5
    intensity_min: float = 0.2
    intensity_max: float = 1.0
    sigma: float = 0.1
    noise_field: str = ""
    # schedule
    T: int = 40
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # networks
    net_width: int = 32
    net_depth: int = 4
    time_embed_dim: int = 32
    patch: int = 32
    # baseline CNN denoiser
    baseline_lr: float = 1e-3
    baseline_batch: int = 10
    baseline_epochs: int = 250
    # DDPM
    ddpm_lr: float = 2e-4
    ddpm_batch: int = 8
    ddpm_steps: int = 4000
    # conversion net
    t_m: int = 40
    p_i: int = 50
    theta_lr: float = 2e-4
    theta_batch: int = 8
    theta_outer: int = 1000
    # sampling
    t0: int = 15  # 0 picks the step whose noise variance matches sigma
    reverse_coef: str = "standard"
    renoise_scale: str = "paper"
    inner_step: str = "per-sample"
    theta_param: str = "noise-scaled"

    def validate(self):
        for name, allowed in CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{flag(name)} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.size < 32:
            raise ConfigError("--size must be >= 32")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("--n-train and --n-test must be >= 1")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ConfigError("need 1 <= --shapes-min <= --shapes-max")
        if not 0 <= self.intensity_min <= self.intensity_max <= 1:
            raise ConfigError("intensities must satisfy 0 <= min <= max <= 1")
        if self.sigma < 0:
            raise ConfigError("--sigma must be >= 0")
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("invalid schedule: need T >= 1 and 0 < beta-start <= beta-end < 1")
        if not 1 <= self.t_m <= self.T:
            raise ConfigError(f"--t-m must lie in [1, T={self.T}]")
        if not 0 <= self.t0 <= self.t_m:
            raise ConfigError(f"--t0 must lie in [0, t-m={self.t_m}] (0 = match the noise level)")
        if self.p_i < 1:
            raise ConfigError("--p-i must be >= 1")
        if self.patch < 4 or self.patch > self.size:
            raise ConfigError("--patch must lie in [4, size]")
        if self.net_width < 1 or self.net_depth < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("invalid network shape")
        for name in ("baseline_batch", "ddpm_batch", "theta_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{flag(name)} must be >= 1")
        for name in ("baseline_epochs", "ddpm_steps", "theta_outer"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{flag(name)} must be >= 0")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def channels(self):
        return (1,) + (self.net_width,) * (self.net_depth - 1) + (1,)


def flag(name):
    return "--" + name.replace("_", "-")


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TYPES = {"int": int, "float": float, "str": str}


def coerce(name, value):
    f = _FIELDS[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        return _TYPES[kind](value)
    except ValueError:
        raise ConfigError(f"{flag(name)}: cannot parse {value!r} as {kind}") from None


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        name = key.lstrip("-").replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[name] = coerce(name, value)
    return values


def load_config(path=None, overrides=None):
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig(**values).validate()


def dump_config(cfg):
    """key=value text, one line per field, dash-spelled keys."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{flag(f.name)[2:]}={v if isinstance(v, str) else repr(v)}")
    return "\n".join(lines) + "\n"
