"""Command line behavior: artifacts, stdout contracts, exit codes."""
import os

import numpy as np
import pytest
import yaml

import dpsparse as dps
from dpsparse import accounting, cli


def blobs_yaml(tmp_path, name="run.yaml", **train_over):
    cfg = {
        "model": {"input": [8], "layers": [
            {"kind": "fully_connected", "out": 6}, {"kind": "relu"},
            {"kind": "fully_connected", "out": 3}]},
        "data": {"kind": "blobs",
                 "blobs": {"num_classes": 3, "n_per_class": 16, "dim": 8}},
        "train": {"lr": 0.5, "sigma": 1.0, "batch_size": 8, "steps": 3,
                  **train_over},
    }
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


def test_run_writes_artifacts_and_reports(tmp_path, capsys):
    cfg = blobs_yaml(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--out", str(out)]) == 0
    line = capsys.readouterr().out
    assert line.startswith("acc ") and str(out) in line
    for name in ("metrics.csv", "checkpoint.npz", "summary.txt"):
        assert (out / name).exists(), name


def test_run_rerun_byte_identical(tmp_path):
    cfg = blobs_yaml(tmp_path)
    assert cli.main(["run", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", cfg, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() \
        == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_env_var_sets_output_dir(tmp_path, monkeypatch, capsys):
    cfg = blobs_yaml(tmp_path)
    env_dir = tmp_path / "from_env"
    monkeypatch.setenv("DPSPARSE_OUTPUT_DIR", str(env_dir))
    assert cli.main(["run", cfg]) == 0
    assert (env_dir / "metrics.csv").exists()
    # an explicit flag still beats the environment
    flag_dir = tmp_path / "from_flag"
    assert cli.main(["run", cfg, "--out", str(flag_dir)]) == 0
    assert (flag_dir / "metrics.csv").exists()
    capsys.readouterr()


def test_sweep_end_to_end(tmp_path, capsys):
    base = blobs_yaml(tmp_path, name="base.yaml")
    spec = tmp_path / "sweep.yaml"
    spec.write_text(yaml.safe_dump(
        {"base": "base.yaml", "grid": {"train.lr": [0.1, 0.5]},
         "seeds": [0, 1]}))
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(spec), "--out", str(out)]) == 0
    assert "4 runs, 0 failed" in capsys.readouterr().out
    assert (out / "results.csv").exists() and (out / "aggregate.csv").exists()


def test_calibrate_prints_bare_sigma(capsys):
    assert cli.main(["calibrate", "--eps", "1.2", "--delta", "1e-5",
                     "--q", "0.01", "--steps", "100"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    sigma = float(out[0])     # nothing but the number on the line
    want = accounting.calibrate_sigma(
        accounting.PrivacyBudget(1.2, 1e-5), 0.01, 100)
    assert sigma == want


def test_eval_subcommand_on_mnist(tmp_path, mnist_dir, capsys):
    cfg = {
        "model": {"input": [1, 28, 28], "layers": [
            {"kind": "flatten"}, {"kind": "fully_connected", "out": 10}]},
        "data": {"kind": "mnist_idx", "path": mnist_dir,
                 "normalize": {"mean": 0.1307, "std": 0.3081}},
        "train": {"lr": 0.1, "sigma": 1.5, "batch_size": 64, "steps": 2},
    }
    path = tmp_path / "mnist.yaml"
    path.write_text(yaml.safe_dump(cfg))
    out = tmp_path / "out"
    assert cli.main(["run", str(path), "--out", str(out)]) == 0
    capsys.readouterr()
    code = cli.main(["eval", str(out / "checkpoint.npz"), mnist_dir,
                     "--split", "test"])
    assert code == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("test_acc ")
    acc = float(line.split()[1])
    assert 0.0 <= acc <= 1.0


# -- exit codes ----------------------------------------------------------------

def test_exit_missing_config_is_filesystem(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.yaml")]) == 6
    assert "FileNotFoundError" in capsys.readouterr().err


def test_exit_bad_config_is_configuration(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("data: {kind: blobs}\n")    # model and train missing
    assert cli.main(["run", str(p)]) == 2
    assert "ConfigurationError" in capsys.readouterr().err


def test_exit_corrupt_idx_is_data_format(tmp_path, capsys):
    ddir = tmp_path / "idx"
    ddir.mkdir()
    (ddir / "train-images-idx3-ubyte").write_bytes(b"\x00" * 32)
    (ddir / "train-labels-idx1-ubyte").write_bytes(b"\x00" * 32)
    cfg = {
        "model": {"input": [1, 28, 28], "layers": [
            {"kind": "flatten"}, {"kind": "fully_connected", "out": 10}]},
        "data": {"kind": "mnist_idx", "path": str(ddir)},
        "train": {"lr": 0.1, "sigma": 1.0, "batch_size": 8, "steps": 1},
    }
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "bad magic" in capsys.readouterr().err


def test_exit_divergence_is_numerical(tmp_path, capsys):
    cfg = blobs_yaml(tmp_path, lr=1e200, sigma=0.0, steps=3)
    with np.errstate(over="ignore", invalid="ignore"):
        code = cli.main(["run", cfg, "--out", str(tmp_path / "o")])
    assert code == 4
    assert "NumericalError" in capsys.readouterr().err


def test_exit_unreachable_budget_is_calibration(capsys):
    code = cli.main(["calibrate", "--eps", "1e-9", "--delta", "1e-12",
                     "--q", "1.0", "--steps", "100000"])
    assert code == 5
    assert "CalibrationError" in capsys.readouterr().err


def test_exit_unexpected_is_one(tmp_path, monkeypatch, capsys):
    monkeypatch.setitem(cli._COMMANDS, "run",
                        lambda args: (_ for _ in ()).throw(RuntimeError("boom")))
    assert cli.main(["run", blobs_yaml(tmp_path)]) == 1
    assert "RuntimeError" in capsys.readouterr().err
