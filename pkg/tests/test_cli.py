import hashlib
import json
from pathlib import Path

import pytest

from k2recon.cli import main
from k2recon.data import read_array_container, write_array_container


def run(argv):
    return main([str(a) for a in argv])


def dir_digest(path, suffix=".bin"):
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob(f"*{suffix}")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = run(["gen-data", "--out", out, "--height", 32, "--width", 32,
                "--ncoil", 2, "--train-count", 3, "--val-count", 1,
                "--test-count", 2, "--accel", 2, "--acs-lines", 4,
                "--noise-sigma", 0.002, "--seed", 0])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "train"
    code = run(["train", "--dataset", dataset, "--out", out,
                "--unroll-k", 2, "--epochs", 2, "--batch", 2,
                "--k2c-steps", 1, "--k2c-prob", 0.5, "--seed", 0])
    assert code == 0
    return out / "checkpoint_best"


def test_gen_data_writes_manifest_and_resolved_config(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["kind"] == "dataset"
    assert len(manifest["meta"]["samples"]) == 6
    resolved = json.loads((dataset / "config.resolved.json").read_text())
    assert resolved["command"] == "gen-data"
    assert resolved["resolved"]["h"] == 32


def test_gen_data_default_counts(tmp_path):
    # Default config writes 20/5/5 = 30 samples.
    out = tmp_path / "full"
    assert run(["gen-data", "--out", out, "--acs-lines", 6, "--seed", 1]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["meta"]["samples"]) == 30
    read_array_container(out, expect_kind="dataset")


def test_gen_data_invalid_height_exits_2(tmp_path, capsys):
    code = run(["gen-data", "--out", tmp_path / "bad", "--height", 8])
    assert code == 2
    assert "32" in capsys.readouterr().err


def test_gen_data_rerun_byte_identical(tmp_path):
    args = ["gen-data", "--height", 32, "--width", 32, "--ncoil", 2,
            "--train-count", 2, "--val-count", 1, "--test-count", 1,
            "--accel", 2, "--acs-lines", 4, "--seed", 3]
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run(args + ["--out", a]) == 0
    assert run(args + ["--out", b]) == 0
    assert dir_digest(a) == dir_digest(b)
    assert (a / "manifest.json").read_text() == (b / "manifest.json").read_text()


def test_train_writes_checkpoints_log_and_curves(checkpoint):
    run_dir = checkpoint.parent
    assert (checkpoint / "manifest.json").is_file()
    assert (run_dir / "checkpoint_last" / "manifest.json").is_file()
    log_lines = (run_dir / "train_log.ndjson").read_text().strip().splitlines()
    assert len(log_lines) == 2
    rec = json.loads(log_lines[0])
    assert {"epoch", "train_loss", "val_psnr", "val_ssim", "lr", "seconds"} <= set(rec)
    assert (run_dir / "training_curves.png").is_file()


def test_reconstruct_requires_checkpoint_or_baseline(dataset, tmp_path):
    assert run(["reconstruct", "--dataset", dataset, "--out", tmp_path / "r"]) == 2


def test_reconstruct_missing_checkpoint_exits_2(dataset, tmp_path, capsys):
    code = run(["reconstruct", "--dataset", dataset, "--out", tmp_path / "r",
                "--checkpoint", tmp_path / "nope"])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_reconstruct_eval_twice_bit_identical(dataset, checkpoint, tmp_path):
    a = tmp_path / "ra"
    b = tmp_path / "rb"
    for out in (a, b):
        assert run(["reconstruct", "--dataset", dataset, "--out", out,
                    "--checkpoint", checkpoint, "--no-render"]) == 0
    assert dir_digest(a) == dir_digest(b)


def test_reconstruct_renders_pngs_with_residuals(dataset, checkpoint, tmp_path):
    out = tmp_path / "rendered"
    assert run(["reconstruct", "--dataset", dataset, "--out", out,
                "--checkpoint", checkpoint]) == 0
    assert list(out.glob("test_*.recon.png"))
    assert list(out.glob("test_*.residual.png"))
    meta, arrays = read_array_container(out, expect_kind="recon")
    assert meta["k2c_steps"] == 1
    assert len(arrays) == 2  # two test samples


def test_reconstruct_baselines(dataset, tmp_path):
    for baseline in ("zero-filled", "cg-sense"):
        out = tmp_path / baseline
        assert run(["reconstruct", "--dataset", dataset, "--out", out,
                    "--baseline", baseline, "--no-render"]) == 0
        meta, _ = read_array_container(out, expect_kind="recon")
        assert meta["method"] == baseline


def test_evaluate_two_dirs_one_table(dataset, checkpoint, tmp_path, capsys):
    model_dir = tmp_path / "model"
    zf_dir = tmp_path / "zf"
    assert run(["reconstruct", "--dataset", dataset, "--out", model_dir,
                "--checkpoint", checkpoint, "--no-render"]) == 0
    assert run(["reconstruct", "--dataset", dataset, "--out", zf_dir,
                "--baseline", "zero-filled", "--no-render"]) == 0
    out = tmp_path / "eval"
    assert run(["evaluate", model_dir, zf_dir, "--dataset", dataset,
                "--out", out]) == 0
    table = (out / "table.txt").read_text()
    assert "zero-filled" in table and "self-K2-m1" in table
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 3  # header + two methods
    reports = json.loads((out / "metrics.json").read_text())
    assert len(reports) == 2


def test_evaluate_sweep_emits_curve(dataset, tmp_path):
    # Fabricate recon containers differing only in k2c_steps.
    _, arrays = read_array_container(dataset, expect_kind="dataset")
    recon_dirs = []
    for m in (0, 1, 2):
        rdir = tmp_path / f"m{m}"
        recons = {}
        sample_meta = []
        for name in arrays:
            if name.startswith("test_") and name.endswith(".ground_truth"):
                sid = name.split(".")[0]
                recons[f"{sid}.recon"] = arrays[name] * (1 - 0.02 * m)
                sample_meta.append({"id": sid, "role": "test"})
        write_array_container(rdir, "recon",
                              {"method": f"sweep-m{m}", "k2c_steps": m,
                               "acceleration": 2.0, "samples": sample_meta},
                              recons)
        recon_dirs.append(rdir)
    out = tmp_path / "sweep_eval"
    assert run(["evaluate", *recon_dirs, "--dataset", dataset, "--out", out]) == 0
    assert (out / "psnr_vs_m.png").is_file()
    sweep_rows = (out / "psnr_vs_m.csv").read_text().strip().splitlines()
    assert len(sweep_rows) == 4


def test_evaluate_empty_recon_dir_exits_2(dataset, tmp_path, capsys):
    empty = tmp_path / "empty"
    write_array_container(empty, "recon",
                          {"method": "none", "acceleration": 2.0, "samples": []},
                          {})
    code = run(["evaluate", empty, "--dataset", dataset, "--out", tmp_path / "e"])
    assert code == 2
    assert "no reconstructions" in capsys.readouterr().err


def test_threads_flag_and_env(dataset, checkpoint, tmp_path, monkeypatch):
    out = tmp_path / "threaded"
    assert run(["reconstruct", "--dataset", dataset, "--out", out,
                "--checkpoint", checkpoint, "--no-render", "--threads", 2]) == 0
    serial = tmp_path / "serial"
    monkeypatch.setenv("K2RECON_THREADS", "2")
    assert run(["reconstruct", "--dataset", dataset, "--out", serial,
                "--checkpoint", checkpoint, "--no-render"]) == 0
    assert dir_digest(out) == dir_digest(serial)


def test_train_resume_flag(dataset, tmp_path):
    out = tmp_path / "resume_run"
    base = ["train", "--dataset", dataset, "--unroll-k", 2, "--batch", 2,
            "--k2c-steps", 1, "--seed", 0, "--out", out]
    assert run(base + ["--epochs", 1]) == 0
    assert run(base + ["--epochs", 2, "--resume"]) == 0
    log_lines = (out / "train_log.ndjson").read_text().strip().splitlines()
    assert [json.loads(l)["epoch"] for l in log_lines] == [0, 1]
    # Resuming with no checkpoint present is a configuration error.
    assert run(["train", "--dataset", dataset, "--out", tmp_path / "fresh",
                "--epochs", 1, "--resume"]) == 2


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"hh": 64}}))
    assert run(["gen-data", "--out", tmp_path / "o", "--config", cfg]) == 2


def test_usage_error_exit_code():
    assert run(["reconstruct"]) == 2
