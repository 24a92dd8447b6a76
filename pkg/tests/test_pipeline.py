import csv
import struct

import numpy as np
import pytest

from oracles import brute_force_mse
from riciandiff.metrics import psnr
from riciandiff.noise import RicianParams, rician_magnitude
from riciandiff.numcore import Net, NetSpec, param_hash
from riciandiff.pipeline import experiment as E
from riciandiff.pipeline.checkpoint import (
    BadMagicError, Checkpoint, CheckpointError, KindMismatchError, TruncatedError, VersionMismatchError,
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
)
from riciandiff.pipeline.cli import EXIT_CODES, main
from riciandiff.pipeline.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config_text
from riciandiff.pipeline.imageio import decode_f64, encode_f64, read_image, read_pgm16, write_image
from riciandiff.pipeline.phantoms import (
    PhantomSpec, generate_phantom_dataset, image_seeds, load_split, make_pair, make_phantom, noise_source,
    read_manifest,
)

TINY = ExperimentConfig(size=32, n_train=3, n_test=2, net_width=4, net_depth=2, time_embed_dim=4, patch=16,
                        baseline_epochs=2, baseline_batch=2, ddpm_steps=3, ddpm_batch=2, theta_outer=2,
                        theta_batch=2, p_i=2, t0=3).validate()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, E.run_experiment(TINY, out)


# -- phantoms --

def test_phantom_determinism_and_range():
    spec = PhantomSpec(size=48)
    a = make_phantom(spec, np.random.default_rng(5))
    b = make_phantom(spec, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    assert a.shape == (48, 48) and a.min() >= 0 and a.max() <= 1
    assert a[0, 0] == 0 and a.max() > 0.2


def test_zero_sigma_pair_is_identical():
    clean, noisy = make_pair(PhantomSpec(), 123, noise_source(0.0))
    np.testing.assert_array_equal(clean, noisy)


def test_pair_second_moment(rng):
    spec = PhantomSpec(size=256)
    clean, noisy = make_pair(spec, 7, noise_source(0.1))
    assert abs(np.mean(noisy ** 2 - clean ** 2) / 0.01 - 1) < 0.05


def test_generated_noise_matches_direct_rician():
    seed = 99
    clean, noisy = make_pair(PhantomSpec(), seed, noise_source(0.3))
    geo, noise = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    np.testing.assert_array_equal(clean, make_phantom(PhantomSpec(), geo))
    np.testing.assert_array_equal(noisy, rician_magnitude(clean, RicianParams(0.3), noise))


def test_split_hygiene(tmp_path):
    generate_phantom_dataset(tmp_path, PhantomSpec(size=32), 4, 3, 0.1)
    rows = read_manifest(tmp_path)
    train = {r["seed"] for r in rows if r["split"] == "train"}
    test = {r["seed"] for r in rows if r["split"] == "test"}
    assert len(train) == 4 and len(test) == 3 and not train & test
    clean, noisy = load_split(tmp_path, "test")
    assert clean.shape == noisy.shape == (3, 32, 32)
    tr, te = image_seeds(0, 50, 50)
    assert len(set(tr) | set(te)) == 100


def test_dataset_is_reproducible(tmp_path):
    for d in ("a", "b"):
        generate_phantom_dataset(tmp_path / d, PhantomSpec(size=32, seed=4), 2, 2, 0.1)
    for name in ("manifest.csv", "train/noisy_0001.f64", "test/clean_0000.f64"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- image io --

def test_f64_roundtrip(rng):
    img = rng.standard_normal((5, 7))
    data = encode_f64(img)
    assert struct.unpack_from("<II", data) == (7, 5)
    assert decode_f64(data).tobytes() == img.tobytes()


def test_pgm_roundtrip_quantises(tmp_path, rng):
    img = rng.uniform(0, 1, (6, 9))
    write_image(tmp_path / "x.pgm", img)
    back = read_pgm16(tmp_path / "x.pgm")
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-12
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n9 6\n65535\n")


def test_unknown_image_suffix(tmp_path):
    with pytest.raises(ValueError):
        read_image(tmp_path / "x.png")


# -- checkpoints --

def small_ckpt(rng, kind="ddpm"):
    net = Net.init(NetSpec((1, 3, 1), time_embed_dim=4, residual=False), rng)
    return Checkpoint(kind, net, {"T": 40, "beta_start": 1e-4, "beta_end": 0.02}, {"steps": 5})


def test_checkpoint_roundtrip(tmp_path, rng):
    ck = small_ckpt(rng)
    save_checkpoint(tmp_path / "c.ckpt", ck)
    back = load_checkpoint(tmp_path / "c.ckpt", expect_kind="ddpm")
    assert param_hash(back.net) == param_hash(ck.net)
    assert back.net.spec == ck.net.spec and back.metadata == {"steps": 5}
    assert encode_checkpoint(back) == encode_checkpoint(ck)
    assert back.make_schedule().T == 40


def test_checkpoint_error_taxonomy(rng):
    data = encode_checkpoint(small_ckpt(rng))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(TruncatedError):
        decode_checkpoint(data[:-8])
    with pytest.raises(TruncatedError):
        decode_checkpoint(data[:10])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data + b"\0")
    with pytest.raises(KindMismatchError):
        decode_checkpoint(data, expect_kind="theta")


# -- config --

def test_config_text_roundtrip():
    cfg = ExperimentConfig(sigma=0.25, renoise_scale="consistent", noise_field="/tmp/field.f64")
    assert ExperimentConfig(**parse_config_text(dump_config(cfg))) == cfg


def test_config_parsing_rules(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nsigma = 0.2\nddpm-steps=7  # trailing\n\n")
    cfg = load_config(p, {"ddpm_steps": 9, "seed": None})
    assert cfg.sigma == 0.2 and cfg.ddpm_steps == 9 and cfg.seed == 0
    for bad in ("bogus=1", "sigma", "ddpm-steps=seven"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)


@pytest.mark.parametrize("kw", [{"t0": 41}, {"t_m": 10, "t0": 12}, {"renoise_scale": "x"}, {"size": 16},
                                {"sigma": -1.0}, {"p_i": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw).validate()


def test_stage_rngs_are_independent():
    a = E.stage_rng(TINY, "ddpm").standard_normal(4)
    b = E.stage_rng(TINY, "theta").standard_normal(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, E.stage_rng(TINY, "ddpm").standard_normal(4))


# -- experiment --

def read_report(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_run_writes_artifacts(tiny_run):
    out, result = tiny_run
    for name in ("baseline.ckpt", "ddpm.ckpt", "theta.ckpt", "ddpm_loss.csv", "eval/report.csv",
                 "eval/images/rddpm_0001.pgm", "config.txt", "eval/config.txt"):
        assert (out / name).exists(), name
    assert load_checkpoint(out / "theta.ckpt").metadata["steps"] == 4
    assert load_checkpoint(out / "ddpm.ckpt").metadata["steps"] == 3


def test_report_noisy_passthrough(tiny_run):
    out, _ = tiny_run
    clean, noisy = load_split(out / "data", "test")
    rows = [r for r in read_report(out / "eval/report.csv") if r["method"] == "noisy" and r["image"] != "mean"]
    for r, c, n in zip(rows, clean, noisy):
        expected = 10 * np.log10(1 / brute_force_mse(c, np.clip(n, 0, 1)))
        assert abs(float(r["psnr"]) - expected) < 1e-9


def test_report_means_are_column_means(tiny_run):
    out, _ = tiny_run
    rows = read_report(out / "eval/report.csv")
    assert len(rows) == 2 * 4 + 4 and len(rows[0]) == 4 + 36
    for method in E.METHODS:
        sel = [r for r in rows if r["method"] == method]
        mean = [r for r in sel if r["image"] == "mean"][0]
        for key in ("psnr", "ssim", "s0_mscn_alpha", "s1_antidiag_sigma_r"):
            vals = [float(r[key]) for r in sel if r["image"] != "mean"]
            assert abs(float(mean[key]) - np.mean(vals)) < 1e-12


def test_evaluate_lists_missing_checkpoints(tmp_path, tiny_run):
    out, result = tiny_run
    with pytest.raises(E.MissingCheckpointError, match="ddpm, theta"):
        E.evaluate(TINY, out / "data", {"baseline": result["baseline"]}, tmp_path)


def test_rddpm_model_rejects_schedule_mismatch(tiny_run):
    _, result = tiny_run
    with pytest.raises(ValueError):
        E.rddpm_model(TINY, result["ddpm"], Checkpoint("theta", result["theta"].net,
                                                      {"T": 40, "beta_start": 1e-4, "beta_end": 0.03}))


def test_divergence_saves_last_state(tmp_path, tiny_run):
    out, _ = tiny_run
    cfg = TINY.replace(baseline_epochs=3, baseline_lr=1e300)
    with np.errstate(all="ignore"), pytest.raises(E.TrainingDiverged):
        E.train_baseline(cfg, out / "data", tmp_path / "b.ckpt", tmp_path / "b.csv")
    ck = load_checkpoint(tmp_path / "b.ckpt")
    assert "aborted" in ck.metadata
    assert np.all(np.isfinite(ck.net.flat()))


def test_zero_noise_baseline_is_near_identity(tmp_path):
    cfg = TINY.replace(sigma=0.0, n_train=2, n_test=2, baseline_epochs=5)
    E.synth(cfg, tmp_path)
    ck = E.train_baseline(cfg, tmp_path)
    clean, noisy = load_split(tmp_path, "test")
    # identity initialisation plus a few small steps
    assert psnr(clean[0], np.clip(E.apply_baseline(ck, noisy[0]), 0, 1)) >= 40


# -- cli --

def tiny_flags():
    return ["--size", "32", "--n-train", "3", "--n-test", "2", "--net-width", "4", "--net-depth", "2",
            "--time-embed-dim", "4", "--patch", "16", "--baseline-epochs", "2", "--baseline-batch", "2",
            "--ddpm-steps", "3", "--ddpm-batch", "2", "--theta-outer", "2", "--theta-batch", "2", "--p-i", "2",
            "--t0", "3"]


def test_cli_verbs_end_to_end(tmp_path, capsys):
    f = tiny_flags()
    d = tmp_path / "data"
    assert main(["synth", "--out", str(d)] + f) == 0
    assert main(["train-baseline", "--data", str(d), "--out", str(tmp_path / "b.ckpt")] + f) == 0
    assert (tmp_path / "b.ckpt.config.txt").exists() and (tmp_path / "b.ckpt.loss.csv").exists()
    for verb, name in (("train-ddpm", "d.ckpt"), ("train-rddpm", "t.ckpt")):
        assert main([verb, "--data", str(d), "--baseline", str(tmp_path / "b.ckpt"),
                     "--out", str(tmp_path / name)] + f) == 0
    ck = ["--baseline", str(tmp_path / "b.ckpt"), "--ddpm", str(tmp_path / "d.ckpt"), "--theta", str(tmp_path / "t.ckpt")]
    assert main(["denoise", "--input", str(d / "test/noisy_0000.f64"), "--output", str(tmp_path / "o.pgm"),
                 "--method", "rddpm"] + ck + f) == 0
    assert read_image(tmp_path / "o.pgm").shape == (32, 32)
    assert main(["evaluate", "--data", str(d), "--out", str(tmp_path / "ev"), "--methods", "noisy,rddpm"] + ck + f) == 0
    assert "rddpm" in capsys.readouterr().out
    assert main(["inspect-checkpoint", str(tmp_path / "t.ckpt")]) == 0
    assert '"kind": "theta"' in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["inspect-checkpoint", str(tmp_path / "missing.ckpt")]) == EXIT_CODES["missing-input"]
    (tmp_path / "junk.ckpt").write_bytes(b"junk file")
    assert main(["inspect-checkpoint", str(tmp_path / "junk.ckpt")]) == EXIT_CODES["checkpoint"]
    assert "error [checkpoint:" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path), "--t0", "50"]) == EXIT_CODES["config"]
    (tmp_path / "img.f64").write_bytes(encode_f64(np.zeros((32, 32))))
    assert main(["denoise", "--input", str(tmp_path / "img.f64"), "--output", str(tmp_path / "o.f64"),
                 "--method", "rddpm"]) == EXIT_CODES["missing-input"]
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == EXIT_CODES["usage"]


def test_start_timestep_auto():
    assert E.start_timestep(ExperimentConfig()) == 15
    assert E.start_timestep(ExperimentConfig(t0=0)) == 5
    assert E.start_timestep(ExperimentConfig(t0=0, sigma=0.3)) > 5


# -- standard phantom run (shared with the acceptance suite) --

def loss_column(path):
    return np.array([float(r["loss"]) for r in read_report(path)])


@pytest.mark.slow
def test_standard_ddpm_loss_trend(standard_run):
    loss = loss_column(standard_run["out"] / "ddpm_loss.csv")
    blocks = loss[:len(loss) // 500 * 500].reshape(-1, 500).mean(axis=1)
    assert len(blocks) >= 4 and np.all(np.diff(blocks) < 0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="uniformly drawn timesteps make a 100-step average too noisy to be monotone")
def test_standard_ddpm_loss_sliding_average_monotone(standard_run):
    loss = loss_column(standard_run["out"] / "ddpm_loss.csv")
    assert np.all(np.diff(np.convolve(loss, np.ones(100) / 100, "valid")) <= 0)


@pytest.mark.slow
def test_standard_baseline_improves_on_noisy(standard_run):
    means = E.summary(standard_run["rows"])
    assert means["baseline"]["psnr"] > means["noisy"]["psnr"]
    assert means["baseline"]["ssim"] > means["noisy"]["ssim"]
