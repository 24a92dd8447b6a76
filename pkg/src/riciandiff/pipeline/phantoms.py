"""Synthetic phantoms standing in for clean anatomical slices, and paired noisy datasets."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..noise import EmpiricalSource, GaussianSource, RicianParams, synth_sodium
from .imageio import read_f64, write_f64

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("split", "index", "seed", "clean", "noisy")


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    shapes_min: int = 2
    shapes_max: int = 5
    intensity_min: float = 0.2
    intensity_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("phantom size must be >= 32")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError("need 1 <= shapes_min <= shapes_max")
        if not 0 <= self.intensity_min <= self.intensity_max <= 1:
            raise ValueError("intensities must lie in [0, 1]")


def _coverage(sd):
    """Anti-aliased pixel coverage from a signed distance in pixels (negative inside)."""
    return np.clip(0.5 - sd, 0.0, 1.0)


def _ellipse_sd(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    # first-order distance to the boundary, scaled by the local radius
    return (r - 1.0) * np.minimum(rx, ry)


def _rect_sd(yy, xx, cy, cx, hy, hx, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = np.abs((xx - cx) * c + (yy - cy) * s) - hx
    v = np.abs(-(xx - cx) * s + (yy - cy) * c) - hy
    outside = np.hypot(np.maximum(u, 0), np.maximum(v, 0))
    return outside + np.minimum(np.maximum(u, v), 0)


def make_phantom(spec, rng):
    """A dark background with a low-intensity body ellipse and brighter inserts."""
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    lo, hi = spec.intensity_min, spec.intensity_max
    body = _ellipse_sd(yy, xx, n / 2 + rng.uniform(-2, 2), n / 2 + rng.uniform(-2, 2),
                       n * rng.uniform(0.32, 0.42), n * rng.uniform(0.32, 0.42), rng.uniform(0, np.pi))
    img = _coverage(body) * rng.uniform(lo, lo + 0.3 * (hi - lo))
    for _ in range(rng.integers(spec.shapes_min, spec.shapes_max + 1)):
        cy, cx = n / 2 + rng.uniform(-0.25, 0.25, size=2) * n
        a, b = rng.uniform(0.05, 0.15, size=2) * n
        angle = rng.uniform(0, np.pi)
        sd = _ellipse_sd(yy, xx, cy, cx, a, b, angle) if rng.random() < 0.6 else _rect_sd(yy, xx, cy, cx, a, b, angle)
        cov = _coverage(sd)
        img = img * (1 - cov) + rng.uniform(lo, hi) * cov
    return np.clip(img, 0.0, 1.0)


def image_seeds(master_seed, n_train, n_test):
    """Per-image seeds; train and test seeds are disjoint by check."""
    seeds = np.random.SeedSequence(master_seed).generate_state(n_train + n_test, dtype=np.uint64)
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("seed collision between images; choose another master seed")
    return seeds[:n_train], seeds[n_train:]


def noise_source(sigma, noise_field=None):
    if noise_field:
        return EmpiricalSource(read_f64(noise_field) if isinstance(noise_field, (str, Path)) else noise_field)
    return GaussianSource(RicianParams(sigma))


def make_pair(spec, seed, source):
    geo, noise = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    clean = make_phantom(spec, geo)
    return clean, synth_sodium(clean, source, noise)


def generate_phantom_dataset(out_dir, spec, n_train, n_test, sigma, noise_field=None):
    """Write paired clean/noisy ``.f64`` images under ``train/`` and ``test/`` plus a manifest."""
    out = Path(out_dir)
    source = noise_source(sigma, noise_field)
    train_seeds, test_seeds = image_seeds(spec.seed, n_train, n_test)
    rows = []
    for split, seeds in (("train", train_seeds), ("test", test_seeds)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, seed in enumerate(seeds):
            clean, noisy = make_pair(spec, seed, source)
            cpath, npath = f"{split}/clean_{i:04d}.f64", f"{split}/noisy_{i:04d}.f64"
            write_f64(out / cpath, clean)
            write_f64(out / npath, noisy)
            rows.append({"split": split, "index": i, "seed": seed, "clean": cpath, "noisy": npath})
    with open(out / MANIFEST, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_manifest(data_dir):
    with open(Path(data_dir) / MANIFEST, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["index"], r["seed"] = int(r["index"]), int(r["seed"])
    return rows


def load_split(data_dir, split):
    """(clean, noisy) stacks of shape (N, H, W) for one split."""
    rows = [r for r in read_manifest(data_dir) if r["split"] == split]
    if not rows:
        raise FileNotFoundError(f"no {split} images listed in {Path(data_dir) / MANIFEST}")
    clean = np.stack([read_f64(Path(data_dir) / r["clean"]) for r in rows])
    noisy = np.stack([read_f64(Path(data_dir) / r["noisy"]) for r in rows])
    return clean, noisy
