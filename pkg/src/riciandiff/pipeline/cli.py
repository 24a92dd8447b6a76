"""Command-line interface: ``riciandiff <verb> [options]``.

Every experiment setting is available both as a flag and as a key in a
``--config`` file; flags win. Exit status is 0 on success, otherwise one of
``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path


from ..numcore import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint
from .config import CHOICES, ConfigError, ExperimentConfig, coerce, flag, load_config
from .experiment import (
    METHODS, MissingCheckpointError, TrainingDiverged, denoise, evaluate, run_experiment, stage_rng, summary,
    synth, train_baseline, train_diffusion, train_rddpm_theta, write_config_echo,
)
from .imageio import read_image, write_image

EXIT_CODES = {"usage": 2, "config": 3, "checkpoint": 4, "missing-input": 5, "numerical": 6, "io": 7}


def _add_config_flags(p):
    g = p.add_argument_group("experiment settings (override --config)")
    g.add_argument("--config", help="key=value config file")
    for f in fields(ExperimentConfig):
        name = f.name
        kw = {"dest": name, "default": None, "type": lambda v, n=name: coerce(n, v)}
        if name in CHOICES:
            kw = {"dest": name, "default": None, "choices": CHOICES[name]}
        g.add_argument(flag(name), **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="riciandiff", description="Rician-aware diffusion denoising at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate a paired phantom dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    for verb, needs_baseline in (("train-baseline", False), ("train-ddpm", True), ("train-rddpm", True)):
        p = sub.add_parser(verb, help=f"{verb.split('-', 1)[1]} training")
        p.add_argument("--data", required=True, help="dataset directory written by synth")
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--log", help="loss-curve CSV path (default: <out>.loss.csv)")
        if needs_baseline:
            p.add_argument("--baseline", required=True, help="baseline checkpoint")
        _add_config_flags(p)

    p = sub.add_parser("denoise", help="denoise one image")
    p.add_argument("--input", required=True, help=".f64 or .pgm image")
    p.add_argument("--output", required=True, help=".f64 or .pgm path")
    p.add_argument("--method", required=True, choices=METHODS[1:])
    p.add_argument("--baseline")
    p.add_argument("--ddpm")
    p.add_argument("--theta")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score methods on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--baseline")
    p.add_argument("--ddpm")
    p.add_argument("--theta")
    p.add_argument("--methods", default=",".join(METHODS), help="comma-separated subset of " + ",".join(METHODS))
    _add_config_flags(p)

    p = sub.add_parser("run", help="synth, train everything, evaluate")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    p.add_argument("path")
    return parser


def _cfg(args):
    overrides = {f.name: getattr(args, f.name, None) for f in fields(ExperimentConfig)}
    return load_config(getattr(args, "config", None), overrides)


def _load_ckpts(args, kinds):
    out = {}
    for kind in kinds:
        path = getattr(args, kind, None)
        out[kind] = load_checkpoint(path, expect_kind=kind) if path else None
    return out


def _train(args, fn, needs_baseline):
    cfg = _cfg(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or str(out) + ".loss.csv"
    extra = (load_checkpoint(args.baseline, expect_kind="baseline"),) if needs_baseline else ()
    ckpt = fn(cfg, args.data, *extra, ckpt_path=out, log_path=log_path)
    write_config_echo(cfg, out.parent, out.name + ".config.txt")
    print(json.dumps({"checkpoint": str(out), **ckpt.metadata}, sort_keys=True))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as e:
        return _fail("config", e)
    except CheckpointError as e:
        return _fail("checkpoint", e, e.code)
    except (MissingCheckpointError, FileNotFoundError) as e:
        return _fail("missing-input", e)
    except (TrainingDiverged, NonFiniteError) as e:
        return _fail("numerical", e)
    except (OSError, ValueError) as e:
        # unreadable or malformed input files
        return _fail("io", e)


def _fail(category, err, detail=None):
    tag = f"{category}:{detail}" if detail else category
    print(f"error [{tag}]: {err}", file=sys.stderr)
    return EXIT_CODES[category]


def _dispatch(args):
    verb = args.verb
    if verb == "inspect-checkpoint":
        ck = load_checkpoint(args.path)
        spec = ck.net.spec
        print(json.dumps({"kind": ck.kind, "channels": list(spec.channels), "time_embed_dim": spec.time_embed_dim,
                          "residual": spec.residual, "n_params": spec.n_params(), "schedule": ck.schedule,
                          "metadata": ck.metadata}, indent=2, sort_keys=True))
        return 0
    if verb == "synth":
        cfg = _cfg(args)
        rows = synth(cfg, args.out)
        print(f"wrote {len(rows)} image pairs to {args.out}")
        return 0
    if verb == "train-baseline":
        _train(args, train_baseline, False)
        return 0
    if verb == "train-ddpm":
        _train(args, train_diffusion, True)
        return 0
    if verb == "train-rddpm":
        _train(args, train_rddpm_theta, True)
        return 0
    if verb == "denoise":
        cfg = _cfg(args)
        needed = {"baseline": ["baseline"], "ddpm": ["ddpm"], "rddpm": ["ddpm", "theta"]}[args.method]
        missing = [k for k in needed if not getattr(args, k)]
        if missing:
            raise MissingCheckpointError(f"--method {args.method} needs " + ", ".join("--" + k for k in missing))
        ck = _load_ckpts(args, needed)
        img = read_image(args.input)
        rng = stage_rng(cfg, "eval", 0, METHODS.index(args.method))
        out = denoise(cfg, args.method, img, rng, ck.get("baseline"), ck.get("ddpm"), ck.get("theta"))
        out_path = Path(args.output)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_image(out_path, out)
        write_config_echo(cfg, out_path.parent, out_path.name + ".config.txt")
        return 0
    if verb == "evaluate":
        cfg = _cfg(args)
        methods = tuple(m for m in args.methods.split(",") if m)
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s): {', '.join(bad)}")
        ck = _load_ckpts(args, ["baseline", "ddpm", "theta"])
        rows = evaluate(cfg, args.data, ck, args.out, methods)
        _print_summary(rows)
        return 0
    if verb == "run":
        cfg = _cfg(args)
        result = run_experiment(cfg, args.out)
        _print_summary(result["rows"])
        return 0
    raise AssertionError(verb)


def _print_summary(rows):
    for method, r in summary(rows).items():
        print(f"{method:>9s}  PSNR {r['psnr']:7.3f} dB  SSIM {r['ssim']:.4f}")


if __name__ == "__main__":
    sys.exit(main())
