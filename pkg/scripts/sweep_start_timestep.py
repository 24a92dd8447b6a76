"""Score ddpm and rddpm over start timesteps and re-noising rules on a finished run.

    python3 scripts/sweep_start_timestep.py runs/standard --t0 3 5 8 15 [--images 20]

Reuses the checkpoints in the run directory; nothing is retrained.
"""
import argparse
from pathlib import Path

import numpy as np

from riciandiff.metrics import psnr, ssim
from riciandiff.pipeline import experiment as E
from riciandiff.pipeline.checkpoint import load_checkpoint
from riciandiff.pipeline.config import load_config
from riciandiff.pipeline.phantoms import load_split


def score(cfg, method, clean, noisy, ck):
    p, s = [], []
    for i, (c, n) in enumerate(zip(clean, noisy)):
        y = E.denoise(cfg, method, n, np.random.default_rng(i), ck["baseline"], ck["ddpm"], ck["theta"])
        p.append(psnr(c, y))
        s.append(ssim(c, y))
    return float(np.mean(p)), float(np.mean(s))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run")
    ap.add_argument("--t0", type=int, nargs="+", default=[3, 5, 8, 15])
    ap.add_argument("--images", type=int, default=20)
    args = ap.parse_args()
    run = Path(args.run)
    cfg = load_config(run / "config.txt")
    ck = {k: load_checkpoint(run / f"{k}.ckpt", expect_kind=k) for k in ("baseline", "ddpm", "theta")}
    clean, noisy = (a[:args.images] for a in load_split(run / "data", "test"))
    print("method    t0  renoise      PSNR    SSIM")
    for m in ("noisy", "baseline"):
        p, s = score(cfg, m, clean, noisy, ck)
        print(f"{m:8s}   -  -         {p:7.3f}  {s:.4f}")
    for t0 in args.t0:
        c = cfg.replace(t0=t0)
        p, s = score(c, "ddpm", clean, noisy, ck)
        print(f"ddpm     {t0:3d}  -         {p:7.3f}  {s:.4f}")
        for rn in ("paper", "consistent"):
            p, s = score(c.replace(renoise_scale=rn), "rddpm", clean, noisy, ck)
            print(f"rddpm    {t0:3d}  {rn:10s}{p:7.3f}  {s:.4f}", flush=True)


if __name__ == "__main__":
    main()
