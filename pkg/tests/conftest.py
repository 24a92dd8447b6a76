import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from riciandiff.numcore import param_hash
from riciandiff.pipeline import experiment as E
from riciandiff.pipeline.config import load_config

ROOT = Path(__file__).resolve().parents[1]

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20241014)


@pytest.fixture(scope="session")
def standard_run(tmp_path_factory):
    """The desk-scale standard run, trained once per session (about 20 minutes)."""
    cfg = load_config(ROOT / "configs" / "standard.txt")
    out = tmp_path_factory.mktemp("standard")
    data = out / "data"
    timings = {}

    def timed(name, fn, *args):
        t = time.perf_counter()
        result = fn(*args)
        timings[name] = time.perf_counter() - t
        return result

    timed("synth", E.synth, cfg, data)
    baseline = timed("baseline", E.train_baseline, cfg, data, out / "baseline.ckpt", out / "baseline_loss.csv")
    ddpm = timed("ddpm", E.train_diffusion, cfg, data, baseline, out / "ddpm.ckpt", out / "ddpm_loss.csv")
    hash_before = param_hash(ddpm.net)
    theta = timed("theta", E.train_rddpm_theta, cfg, data, baseline, out / "theta.ckpt", out / "theta_loss.csv")
    hash_after_theta = param_hash(ddpm.net)
    ckpts = {"baseline": baseline, "ddpm": ddpm, "theta": theta}
    rows = timed("evaluate", E.evaluate, cfg, data, ckpts, out / "eval")
    return {"cfg": cfg, "out": out, "data": data, "ckpts": ckpts, "rows": rows, "timings": timings,
            "hash_before": hash_before, "hash_after_theta": hash_after_theta}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
