"""
Tests for the command-line surface: synth, train, evaluate, cluster, report
"""
import json
import os

import pandas as pd
import pytest

from run import cli_dispatch
from trainer import TrainedBundle

TINY_SETTINGS = """\
# small enough to train in seconds
k=2
rho_grid=0.0,0.5
t_in=4
horizon=3
embed_dim=4
teacher_hidden=8
student_hidden=4
lr=0.01
epochs_teacher=3
epochs_ae=3
epochs_cluster=4
epochs_student=2
p_refresh=2
patience=5
seed=0
"""


@pytest.fixture
def dataset_dir(tmp_path):
    out = str(tmp_path / "data")
    assert cli_dispatch(["synth", "--nodes", "6", "--clusters", "2", "--steps", "120",
                         "--seed", "1", "--out", out]) == 0
    return out


@pytest.fixture
def run_dir(tmp_path, dataset_dir):
    settings = tmp_path / "tiny.conf"
    settings.write_text(TINY_SETTINGS, encoding="utf-8")
    out = str(tmp_path / "run")
    assert cli_dispatch(["train", "--config", str(settings), "--data", dataset_dir, "--out", out,
                         "--batch-size", "8", "--ae-hidden", "3"]) == 0
    return out


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "d"
    assert cli_dispatch(["synth", "--nodes", "30", "--clusters", "3", "--steps", "2000",
                         "--seed", "7", "--out", str(out)]) == 0
    for name in ("series.csv", "adjacency.csv", "labels.csv"):
        assert (out / name).exists()
    assert pd.read_csv(out / "series.csv").shape == (2000, 30)


def test_unknown_command_is_usage_error():
    assert cli_dispatch(["forecast"]) == 2
    assert cli_dispatch([]) == 2


def test_missing_data_fails(tmp_path):
    assert cli_dispatch(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "run")]) == 1


def test_missing_required_flag(tmp_path):
    assert cli_dispatch(["evaluate", "--run", str(tmp_path)]) == 1


def test_train_writes_bundle(run_dir):
    for name in ("config.snapshot", "bundle.json", "curves.csv", os.path.join("clustering", "assignments.csv"),
                 os.path.join("students", "rho.csv"), os.path.join("teacher", "manifest.json")):
        assert os.path.exists(os.path.join(run_dir, name)), name


def test_train_flags_survive_reload(run_dir):
    config = TrainedBundle.load(run_dir).config
    assert (config.batch_size, config.ae_hidden, config.updates_per_epoch) == (8, 3, 20)


def test_evaluate_is_repeatable(run_dir, dataset_dir):
    args = ["evaluate", "--run", run_dir, "--data", dataset_dir, "--horizons", "1,3", "--ensemble-size", "2"]
    assert cli_dispatch(args) == 0
    path = os.path.join(run_dir, "metrics.json")
    first = open(path, "rb").read()

    metrics = json.loads(first)
    assert set(metrics) == {"teacher", "students", "fused", "ensemble"}
    for entry in metrics.values():
        assert set(entry) == {"5min", "15min", "params"}
        assert set(entry["5min"]) == {"mae", "mape", "rmse"}
    assert metrics["ensemble"]["params"] == 2 * metrics["teacher"]["params"]

    quality = json.load(open(os.path.join(run_dir, "cluster_quality.json")))
    assert quality["k"] == 2
    assert -1.0 <= quality["ari"] <= 1.0

    assert cli_dispatch(args) == 0
    assert open(path, "rb").read() == first


def test_cluster_export(run_dir, dataset_dir, tmp_path):
    out = tmp_path / "export" / "assignments.csv"
    assert cli_dispatch(["cluster", "--run", run_dir, "--out", str(out), "--data", dataset_dir]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 6 + 1
    assert lines[0] == "node_id,cluster,z_1,z_2"
    assert (tmp_path / "export" / "cluster_profiles.csv").exists()


def test_report(run_dir, dataset_dir):
    assert cli_dispatch(["evaluate", "--run", run_dir, "--data", dataset_dir, "--horizons", "1,2,3", "--no-ensemble"]) == 0
    assert cli_dispatch(["report", "--run", run_dir]) == 0
    html = open(os.path.join(run_dir, "report.html"), encoding="utf-8").read()
    assert "fused" in html
    frame = pd.read_csv(os.path.join(run_dir, "metrics.csv"))
    assert set(frame["model"]) == {"teacher", "students", "fused"}
    assert len(frame) == 3 * 3
