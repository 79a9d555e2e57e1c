import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from snprune.cli import main
from snprune.model import dense_mlp, load_model, save_model


@pytest.fixture
def run(capsys):
    def _run(*argv):
        rc = main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return rc, out, err

    return _run


@pytest.fixture
def collected(tmp_path, digits_paths, run):
    out = tmp_path / "run"
    rc, _, err = run("collect", "--model", digits_paths["model"], "--data", digits_paths["train_images"],
                     "--labels", digits_paths["train_labels"], "--samples", 512, "--out", out)
    assert rc == 0, err
    return out


def _prune(run, out, paths, *extra):
    return run("prune", "--model", paths["model"], "--out", out, "--test-data", paths["test_images"],
               "--test-labels", paths["test_labels"], *extra)


def test_collect_then_prune(collected, digits_paths, run):
    rc, out, err = _prune(run, collected, digits_paths, "--ratio", 0.5)
    assert rc == 0, err
    summary = json.loads(out)
    assert summary["keep"] == {"fc0": [64, 64], "fc1": [64, 128], "fc2": [64, 128]}
    assert summary["acc_after"] >= 0.9
    assert (collected / "model.pruned.snm" / "manifest.json").is_file()
    assert (collected / "plans" / "fc2.json").is_file()
    pruned = load_model(collected / "model.pruned.snm")
    assert [layer.n_out for layer in pruned.layers if layer.weighted] == [64, 64, 10]


def test_rerun_is_byte_identical(collected, digits_paths, run):
    _, out1, _ = _prune(run, collected, digits_paths, "--method", "random", "--seed", 4)
    report1 = (collected / "report.json").read_bytes()
    _, out2, _ = _prune(run, collected, digits_paths, "--method", "random", "--seed", 4)
    assert json.loads(out1)["model_sha256"] == json.loads(out2)["model_sha256"]
    assert (collected / "report.json").read_bytes() == report1
    _, out3, _ = _prune(run, collected, digits_paths, "--method", "random", "--seed", 5)
    assert json.loads(out3)["model_sha256"] != json.loads(out1)["model_sha256"]


def test_zero_tau_keeps_everything(collected, digits_paths, run):
    rc, out, _ = _prune(run, collected, digits_paths, "--mode", "variance_cutoff", "--tau", 0)
    assert rc == 0
    summary = json.loads(out)
    assert all(k == n for k, n in summary["keep"].values())
    assert summary["speedup"] == 1.0
    assert summary["acc_after"] == summary["acc_before"]


def test_config_file_and_flag_precedence(collected, digits_paths, run, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model_path": str(digits_paths["model"]), "out": str(collected),
                               "spec": {"mode": "uniform", "uniform_ratio": 0.25}}))
    rc, out, _ = run("prune", "--config", cfg)
    assert rc == 0 and json.loads(out)["keep"]["fc2"] == [96, 128]
    rc, out, _ = run("prune", "--config", cfg, "--ratio", 0.75)
    assert rc == 0 and json.loads(out)["keep"]["fc2"] == [32, 128]


def test_white_noise_collect(tmp_path, digits_paths, run):
    rc, out, err = run("collect", "--model", digits_paths["model"], "--white-noise", "--samples", 64,
                       "--out", tmp_path)
    assert rc == 0, err
    assert json.loads(out)["layers"]["fc2"] == {"n": 128, "sample_count": 64}


def test_eval_and_report(collected, digits_paths, run, tmp_path):
    _prune(run, collected, digits_paths)
    rc, out, _ = run("eval", "--model", collected / "model.pruned.snm", "--baseline", digits_paths["model"],
                     "--test-data", digits_paths["test_images"], "--test-labels", digits_paths["test_labels"],
                     "--json", "--report", collected / "report.json")
    assert rc == 0
    result = json.loads(out)
    assert result["samples"] == 500
    assert result["delta"] == pytest.approx(result["accuracy"] - result["baseline_accuracy"])
    rc, out, _ = run("report", collected / "report.json")
    assert rc == 0 and "speedup" in out and "fc2" in out
    rc, _, _ = run("report", collected / "report.json", "--format", "csv", "--output", tmp_path / "r.csv")
    assert rc == 0 and (tmp_path / "r.csv").read_text().splitlines()[-1].startswith("TOTAL,")


def test_stale_cache_exit_3(collected, digits_paths, run, tmp_path):
    rng = np.random.default_rng(0)
    other = dense_mlp([rng.standard_normal((100, 64)), rng.standard_normal((10, 100))])
    save_model(other, tmp_path / "other.snm")
    rc, _, err = run("prune", "--model", tmp_path / "other.snm", "--out", collected)
    assert rc == 3
    assert "stale" in err or "no entry" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["prune", "--model", "/nonexistent/model"],
        ["collect", "--model", "{model}", "--data", "/nonexistent/data", "--labels", "/nonexistent/labels"],
        ["prune", "--model", "{model}", "--ratio", "1.5", "--out", "{out}"],
        ["report", "/nonexistent/report.json"],
        ["prune", "--config", "/nonexistent/cfg.json"],
    ],
)
def test_bad_input_exit_2(argv, run, digits_paths, collected):
    argv = [a.format(model=digits_paths["model"], out=collected) for a in argv]
    rc, _, err = run(*argv)
    assert rc == 2
    assert err.startswith("snprune:")


def test_malformed_model_exit_2(tmp_path, run):
    (tmp_path / "m").mkdir()
    (tmp_path / "m" / "manifest.json").write_text("{not json")
    rc, _, _ = run("eval", "--model", tmp_path / "m")
    assert rc == 2


def test_verify_passes_and_fault_fails(run, collected):
    rc, out, _ = run("verify", "--instances", 1, "--cache", collected / "grams")
    assert rc == 0
    summary = json.loads(out)
    assert summary["synthetic"]["max_relative_error"] <= 1e-8
    assert set(summary["cache"]["max_relative_error_per_layer"]) == {"fc0", "fc1", "fc2"}
    rc, _, err = run("verify", "--instances", 1, "--inject-fault")
    assert rc == 4
    assert "worst_case" in err


def test_locked_output_dir(collected, digits_paths, run):
    from filelock import FileLock

    with FileLock(str(collected / ".snprune.lock")):
        rc, _, err = _prune(run, collected, digits_paths)
    assert rc == 2 and "locked" in err


def test_console_entry_point(tmp_path):
    exe = shutil.which("snprune")
    cmd = [exe] if exe else [sys.executable, "-m", "snprune"]
    proc = subprocess.run(cmd + ["verify", "--instances", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run(cmd + ["verify", "--instances", "1", "--inject-fault"], capture_output=True, text=True)
    assert proc.returncode == 4
