"""
CLI exit-code contract: 0 success, 1 configuration error, 2 runtime failure
"""
import json

import pytest
from typer.testing import CliRunner

from core.exceptions import SimulationError
from scripts.manage import app
from services.experiment_service import ExperimentService

runner = CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text(
        "system: pendulum\n"
        "variant: vv-fvin\n"
        "dataset:\n  count: 5\n  length: 50\n"
        "model:\n  hidden: [8, 8]\n"
        "training:\n  horizon: 3\n  epochs: 2\n  log_every: 1\n"
    )
    return path


def test_simulate(config_file, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(app, ["simulate", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    files = sorted((out / "data").glob("*.jsonl"))
    assert len(files) == 5
    for path in files:
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == 1 + 51
    assert (out / "manifest.json").exists()


def test_train_then_predict(config_file, tmp_path):
    out = tmp_path / "run"
    assert runner.invoke(app, ["train", "--config", str(config_file), "--out", str(out)]).exit_code == 0
    result = runner.invoke(app, ["predict", "--config", str(config_file), "--out", str(out),
                                 "--checkpoint", str(out / "checkpoint.json")])
    assert result.exit_code == 0, result.output
    assert (out / "error_forced.csv").exists()


def test_missing_config_file(tmp_path):
    result = runner.invoke(app, ["simulate", "--config", str(tmp_path / "missing.yaml")])
    assert result.exit_code == 1


def test_missing_checkpoint(config_file, tmp_path):
    result = runner.invoke(app, ["predict", "--config", str(config_file), "--out", str(tmp_path / "run"),
                                 "--checkpoint", str(tmp_path / "none.json")])
    assert result.exit_code == 1


def test_seed_override_changes_data(config_file, tmp_path):
    for seed in ("1", "2"):
        runner.invoke(app, ["simulate", "--config", str(config_file), "--seed", seed,
                            "--out", str(tmp_path / seed)])
    first = (tmp_path / "1" / "data" / "traj_000.jsonl").read_text()
    second = (tmp_path / "2" / "data" / "traj_000.jsonl").read_text()
    assert first != second


def test_runtime_failure(config_file, tmp_path, monkeypatch):
    def fail(service):
        raise SimulationError("integrator blew up", step=4)

    monkeypatch.setattr(ExperimentService, "simulate", fail)
    result = runner.invoke(app, ["simulate", "--config", str(config_file), "--out", str(tmp_path / "run")])
    assert result.exit_code == 2
