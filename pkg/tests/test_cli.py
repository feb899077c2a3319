"""CLI tests: all four subcommands exercised in-process with small configs."""
import json

import numpy as np
import pytest
from conftest import scenario_path

from exoassist import anomaly as ano
from exoassist.cli import main


@pytest.fixture(scope="module")
def small_train_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.json"
    path.write_text(json.dumps({
        "duration": 6.0,
        "seed": 3,
        "subjects": [{"name": "subject-a"}],
        "schedule": {"T": 12, "nu": 4},
        "train": {"epochs": 8, "batch_size": 32, "hidden": [48, 48],
                  "embed_dim": 16, "seed": 2},
    }))
    return path


@pytest.fixture(scope="module")
def small_checkpoint(tmp_path_factory, small_train_config):
    out = tmp_path_factory.mktemp("ckpt") / "det.npz"
    assert main(["train-detector", "--config", str(small_train_config),
                 "--out", str(out)]) == 0
    return out


def test_train_detector_writes_checkpoint(small_checkpoint):
    det = ano.load_checkpoint(small_checkpoint)
    assert det.schedule.T == 12
    assert det.cal_scale > 0.0


def test_train_detector_nonzero_exit_on_divergence(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({
        "duration": 4.0,
        "subjects": [{"name": "subject-a"}],
        "schedule": {"T": 8, "nu": 2},
        "train": {"epochs": 40, "batch_size": 16, "hidden": [16],
                  "embed_dim": 8, "lr": 1e160},
    }))
    assert main(["train-detector", "--config", str(cfg),
                 "--out", str(tmp_path / "x.npz")]) == 2


def test_train_detector_from_csv(tmp_path, trained):
    data = trained["data"]
    csv_path = tmp_path / "win.csv"
    ano.save_windows_csv(csv_path, data["raw"][:200])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "schedule": {"T": 10, "nu": 3},
        "train": {"epochs": 3, "batch_size": 32, "hidden": [32], "embed_dim": 8},
    }))
    out = tmp_path / "det.npz"
    assert main(["train-detector", "--config", str(cfg), "--data", str(csv_path),
                 "--out", str(out)]) == 0
    assert out.exists()


def test_run_scenario_writes_trace_and_report(tmp_path, small_checkpoint):
    trace = tmp_path / "trace.csv"
    report = tmp_path / "report.json"
    scen = tmp_path / "scen.json"
    base = json.loads(scenario_path("water_mouth.json").read_text())
    base["duration"] = 3.0
    scen.write_text(json.dumps(base))
    code = main(["run-scenario", "--scenario", str(scen),
                 "--checkpoint", str(small_checkpoint),
                 "--seed", "4", "--trace", str(trace), "--report", str(report)])
    assert code == 0
    header = trace.read_text().splitlines()[0].split(",")
    assert header[0] == "t" and "s" in header and "subtask" in header
    rep = json.loads(report.read_text())
    assert "replan_count" in rep and "rms_tracking_deg" in rep


def test_eval_planner_rule_scorer(tmp_path):
    report = tmp_path / "planner.json"
    assert main(["eval-planner", "--scorer", "rule", "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["success_rate"] == 1.0
    assert rep["n_items"] == 195


def test_eval_planner_replay_requires_file(tmp_path):
    assert main(["eval-planner", "--scorer", "replay",
                 "--report", str(tmp_path / "r.json")]) == 2


def test_gradcheck_passes():
    assert main(["gradcheck"]) == 0
