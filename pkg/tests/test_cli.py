"""Command-line behavior: run layout, layering, exit codes, reproducibility."""

import json
import os
import subprocess
import sys

import pytest

CLI = [sys.executable, "-m", "voxcaps.cli"]


def run_cli(*args, expect=0):
    r = subprocess.run(CLI + list(args), capture_output=True, text=True)
    assert r.returncode == expect, \
        f"exit {r.returncode} != {expect}\nstdout: {r.stdout}\nstderr: {r.stderr}"
    return r


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "tiny")
    run_cli("gen-data", "--out", out, "--count", "3", "--classes", "2",
            "--channels", "1", "--tier", "easy")
    return out


def test_gen_data_outputs(dataset):
    names = set(os.listdir(dataset))
    assert {"run.json", "manifest.txt", "sample.png"} <= names
    assert {"vol_000.hdr", "vol_000.img", "vol_000.lbl"} <= names
    manifest = json.load(open(os.path.join(dataset, "run.json")))
    assert manifest["subcommand"] == "gen-data"
    assert manifest["config"]["count"] == 3
    listed = {os.path.basename(p) for p in manifest["outputs"]}
    assert "vol_002.hdr" in listed


def test_gen_data_is_reproducible(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        run_cli("gen-data", "--out", out, "--count", "2", "--classes", "2",
                "--channels", "1", "--tier", "easy")
    for name in ("vol_000.img", "vol_000.lbl", "vol_001.img", "manifest.txt"):
        assert read_bytes(os.path.join(a, name)) == \
            read_bytes(os.path.join(b, name)), f"{name} differs between runs"


def test_refuses_to_reuse_run_dir(dataset, tmp_path):
    r = subprocess.run(CLI + ["gen-data", "--out", dataset],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert "never reused" in r.stderr


def test_numbered_run_dirs(tmp_path, monkeypatch):
    env = dict(os.environ, VOXCAPS_OUT=str(tmp_path))
    for want in ("gen-data-000", "gen-data-001"):
        r = subprocess.run(CLI + ["gen-data", "--count", "2", "--classes", "2",
                                  "--channels", "1", "--tier", "easy"],
                           capture_output=True, text=True, env=env)
        assert r.returncode == 0, r.stderr
        assert (tmp_path / want).is_dir()


def _train(dataset, out, *extra):
    return run_cli("train", "--data", dataset, "--out", out,
                   "--max-iters", "30", "--patience", "20",
                   "--eval-every", "15", "--lr", "1e-3", *extra)


def test_train_outputs(dataset, tmp_path):
    out = str(tmp_path / "run")
    _train(dataset, out)
    names = set(os.listdir(out))
    assert {"run.json", "model.vxc", "metrics.tsv", "losses.tsv",
            "dice.png", "losses.png", "panel.png"} <= names
    manifest = json.load(open(os.path.join(out, "run.json")))
    assert manifest["subcommand"] == "train"
    assert manifest["inputs"]["data"] == dataset


def test_train_reproducible(dataset, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    _train(dataset, a)
    _train(dataset, b)
    for name in ("metrics.tsv", "losses.tsv", "model.vxc"):
        assert read_bytes(os.path.join(a, name)) == \
            read_bytes(os.path.join(b, name)), f"{name} differs between runs"


def test_config_file_layering(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iters": 25, "lr": 1e-3}))
    out = str(tmp_path / "run")
    # flag wins over config file for max_iters; config file wins for lr
    run_cli("train", "--data", dataset, "--out", out, "--config", str(cfg),
            "--max-iters", "30", "--patience", "20", "--eval-every", "15")
    manifest = json.load(open(os.path.join(out, "run.json")))
    assert manifest["config"]["max_iters"] == 30
    assert manifest["config"]["lr"] == 1e-3


def test_config_rejects_unknown_keys(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_itres": 25}))
    r = subprocess.run(CLI + ["train", "--data", dataset,
                              "--out", str(tmp_path / "x"),
                              "--config", str(cfg)],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert "max_itres" in r.stderr


def test_missing_data_is_usage_error(tmp_path):
    r = subprocess.run(CLI + ["train", "--out", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert "usage" in r.stderr.lower()


def test_all_losses_off_rejected(dataset, tmp_path):
    r = subprocess.run(CLI + ["train", "--data", dataset,
                              "--out", str(tmp_path / "x"),
                              "--no-margin", "--no-ce", "--no-recon"],
                       capture_output=True, text=True)
    assert r.returncode == 2


def test_eval_subcommand(dataset, tmp_path):
    train_out = str(tmp_path / "train")
    _train(dataset, train_out)
    eval_out = str(tmp_path / "eval")
    r = run_cli("eval", "--data", dataset, "--checkpoint",
                os.path.join(train_out, "model.vxc"), "--out", eval_out)
    assert os.path.exists(os.path.join(eval_out, "metrics.tsv"))
    assert "dice" in r.stdout.lower()


def test_gradcheck_subcommand(tmp_path):
    out = str(tmp_path / "gc")
    r = run_cli("gradcheck", "--scope", "losses", "--out", out)
    assert "pass" in r.stdout
    report = open(os.path.join(out, "report.txt")).read()
    assert "pass" in report
