import csv
import subprocess
import sys

import numpy as np
import pytest

from surrogate_da.cli import main
from surrogate_da.config import load_config
from surrogate_da.grid import read_snapshot

L96 = """
model.kind = lorenz96
lorenz96.n = 40
truth.spinup = 200
surrogate.parameter_bias = 0.2
obs.stride = 2
obs.noise_variance = 0.01
run.horizon = 60
run.operational = true
run.divergence_reference = run
# short runs give a narrow truth range; the exit-code test switches it on
run.divergence_check = false
ensemble.size = 4
ensemble.horizon = 5
ensemble.start_stride = 10
ensemble.start_time = 20
theory.samples = 4
theory.spacing = 10
"""

ADVECTION = """
model.kind = advection2d
advection.n_features = 2
advection.n_lat = 16
advection.n_lon = 24
truth.spinup = 2
surrogate.parameter_bias = 0.05
obs.stride = 4
run.horizon = 30
ensemble.size = 3
ensemble.horizon = 4
ensemble.start_stride = 5
ensemble.start_time = 10
"""

PIPELINE = ["truth", "observe", "assimilate", "metrics", "forecast"]


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _run_all(cfg, run_dir, commands=PIPELINE, extra=()):
    return [main([c, "--config", cfg, "--run-dir", str(run_dir), *extra]) for c in commands]


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("text", [L96, ADVECTION], ids=["lorenz96", "advection2d"])
def test_pipeline_deterministic(tmp_path, text):
    cfg = _write(tmp_path, text)
    assert _run_all(cfg, tmp_path / "a") == [0] * len(PIPELINE)
    assert _run_all(cfg, tmp_path / "b") == [0] * len(PIPELINE)
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and a == b
    expected = {"config.resolved", "metrics.csv", "obs/thinning.meta", "forecasts/rmse.csv", "forecasts/track.csv"}
    assert expected <= a.keys()


def test_seed_override_changes_outputs(tmp_path):
    cfg = _write(tmp_path, ADVECTION)
    _run_all(cfg, tmp_path / "a", ["truth", "observe"])
    _run_all(cfg, tmp_path / "b", ["truth", "observe"], ["--seed", "5"])
    assert load_config(tmp_path / "b" / "config.resolved").run.seed == 5
    ya = read_snapshot(tmp_path / "a" / "obs" / "t3.grid")
    yb = read_snapshot(tmp_path / "b" / "obs" / "t3.grid")
    assert not np.array_equal(ya.values, yb.values)


def test_resolved_config_reloads(tmp_path):
    cfg = _write(tmp_path, L96)
    _run_all(cfg, tmp_path / "r", ["truth"])
    assert load_config(tmp_path / "r" / "config.resolved") == load_config(cfg)


def test_metrics_beat_baseline_and_recompute(tmp_path):
    cfg = _write(tmp_path, L96)
    _run_all(cfg, tmp_path / "r", ["truth", "observe", "assimilate"])
    before = (tmp_path / "r" / "metrics.csv").read_bytes()
    assert main(["metrics", "--config", cfg, "--run-dir", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "metrics.csv").read_bytes() == before
    rows = list(csv.DictReader(open(tmp_path / "r" / "metrics.csv")))
    series = {}
    for r in rows:
        series.setdefault(r["metric_name"], []).append(float(r["value"]))
    assert {"analysis_rmse", "baseline_rmse", "operational_rmse", "analysis_acc"} <= series.keys()
    assert np.mean(series["analysis_rmse"][30:]) < np.mean(series["baseline_rmse"][30:])


def test_verify_theorem_report(tmp_path):
    cfg = _write(tmp_path, L96)
    assert _run_all(cfg, tmp_path / "r", ["truth", "observe", "assimilate", "verify-theorem"]) == [0] * 4
    text = (tmp_path / "r" / "stability.txt").read_text()
    for key in ("lambda_hat", "epsilon_hat", "gamma_hat", "tail_mean_error", "surrogate_gap", "gap_bound"):
        assert f"{key} = " in text
    assert "nan" not in text


def test_divergence_exit_code(tmp_path):
    text = L96.replace("surrogate.parameter_bias = 0.2", "surrogate.parameter_bias = 20.0")
    text = text.replace("run.divergence_check = false", "run.divergence_check = true")
    text = text.replace("run.divergence_reference = run", "run.divergence_reference = per_time")
    cfg = _write(tmp_path, text)
    assert _run_all(cfg, tmp_path / "r", ["truth", "observe", "assimilate"]) == [0, 0, 2]
    rows = list(csv.DictReader(open(tmp_path / "r" / "metrics.csv")))
    t_div = [int(r["time_index"]) for r in rows if r["metric_name"] == "diverged_at"]
    assert len(t_div) == 1 and t_div[0] > 1
    assert max(int(r["time_index"]) for r in rows if r["metric_name"] == "analysis_rmse") == t_div[0] - 1


def test_usage_errors(tmp_path, capsys):
    bad = _write(tmp_path, "obs.nosuch = 1\n", "bad.cfg")
    assert main(["truth", "--config", bad, "--run-dir", str(tmp_path / "r")]) == 1
    assert "unknown key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["truth", "--run-dir", str(tmp_path)])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["launch", "--config", bad, "--run-dir", str(tmp_path)])
    assert info.value.code == 1


def test_io_errors(tmp_path):
    cfg = _write(tmp_path, L96)
    assert main(["assimilate", "--config", cfg, "--run-dir", str(tmp_path / "empty")]) == 3
    assert main(["truth", "--config", str(tmp_path / "missing.cfg"), "--run-dir", str(tmp_path / "r")]) == 3


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, ADVECTION.replace("run.horizon = 30", "run.horizon = 3"))
    proc = subprocess.run(
        [sys.executable, "-m", "surrogate_da.cli", "truth", "--config", cfg, "--run-dir", str(tmp_path / "r")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "r" / "snapshots" / "t3.grid").exists()
