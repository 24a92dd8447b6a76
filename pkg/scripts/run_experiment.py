"""Run the standard desk-scale experiment end to end and print a summary.

    python3 scripts/run_experiment.py --out runs/standard [--config configs/standard.txt]

Writes everything ``riciandiff run`` writes, plus ``timings.json`` and
``summary.json`` (mean PSNR/SSIM per method, conversion-net held-out MSE).
"""
import argparse
import json
import time
from pathlib import Path

from riciandiff.pipeline import experiment as E
from riciandiff.pipeline.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=str(ROOT / "configs" / "standard.txt"))
    args = ap.parse_args()
    cfg = load_config(args.config)
    out = Path(args.out)
    data = out / "data"
    timings = {}

    def stage(name, fn, *a):
        t = time.perf_counter()
        result = fn(*a)
        timings[name] = round(time.perf_counter() - t, 2)
        print(f"{name:>9s} done in {timings[name]:.1f}s", flush=True)
        return result

    stage("synth", E.synth, cfg, data)
    baseline = stage("baseline", E.train_baseline, cfg, data, out / "baseline.ckpt", out / "baseline_loss.csv")
    ddpm = stage("ddpm", E.train_diffusion, cfg, data, baseline, out / "ddpm.ckpt", out / "ddpm_loss.csv")
    theta = stage("theta", E.train_rddpm_theta, cfg, data, baseline, out / "theta.ckpt", out / "theta_loss.csv")
    rows = stage("evaluate", E.evaluate, cfg, data, {"baseline": baseline, "ddpm": ddpm, "theta": theta},
                 out / "eval")
    heldout = E.theta_heldout(cfg, data, baseline, theta)
    E.write_config_echo(cfg, out)

    means = {m: {"psnr": r["psnr"], "ssim": r["ssim"]} for m, r in E.summary(rows).items()}
    result = {"start_timestep": E.start_timestep(cfg), "means": means, "theta_heldout_mse": heldout}
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    (out / "summary.json").write_text(json.dumps(result, indent=2) + "\n")
    for m, r in means.items():
        print(f"{m:>9s}  PSNR {r['psnr']:7.3f} dB  SSIM {r['ssim']:.4f}")
    print(f"conversion MSE: theta {heldout['theta']:.4g}, oracle {heldout['oracle']:.4g}")
    print(f"total {sum(timings.values()) / 60:.1f} min")


if __name__ == "__main__":
    main()
