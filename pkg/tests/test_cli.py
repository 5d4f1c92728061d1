import json

import pytest

from src import cli
from src.exceptions import SolverError
from src.services import experiment_service


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "run.json"
    path.write_text(tiny_config.model_copy(update={"t_end": 0.0}).model_dump_json())
    return path


def test_simulate_succeeds_and_honours_out(config_file, tmp_path, capsys, registry_db):
    out = tmp_path / "cli-out"
    code = cli.main(["simulate", "--config", str(config_file), "--out", str(out)])
    assert code == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["output_dir"] == str(out)
    assert (out / "summary.json").exists()
    assert (out / "diagnostics.csv").exists()


def test_overrides_reach_the_config(config_file, monkeypatch, registry_db):
    seen = {}

    def fake_execute(command, config, registry=None, run_id=None):
        seen["command"], seen["config"] = command, config
        return {"files": []}

    monkeypatch.setattr(experiment_service, "execute", fake_execute)
    code = cli.main(["build-rb", "--config", str(config_file), "--workers", "3", "--seed", "5", "--paper-scale"])
    assert code == 0
    assert seen["command"] == "build-rb"
    assert (seen["config"].n_workers, seen["config"].seed, seen["config"].paper_scale) == (3, 5, True)


def test_invalid_config_exits_with_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"mesh": {"nx": 4, "ny": 4, "depth": 2}}))
    assert cli.main(["simulate", "--config", str(path)]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ValidationError"


def test_missing_config_file_exits_with_2(tmp_path, capsys):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ConfigError"


def test_numerical_failure_exits_with_1(config_file, monkeypatch, capsys, registry_db):
    def broken(command, config):
        raise SolverError("factorización singular")

    monkeypatch.setattr(experiment_service, "run_command", broken)
    assert cli.main(["simulate", "--config", str(config_file)]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error == {"error": "SolverError", "message": "factorización singular"}


def test_truncated_trajectory_exits_with_1(config_file, monkeypatch, capsys, registry_db):
    monkeypatch.setattr(
        experiment_service, "run_command", lambda command, config: {"error": "Etapa 'pfield' falló"}
    )
    assert cli.main(["simulate", "--config", str(config_file)]) == 1
    assert "pfield" in capsys.readouterr().err


def test_unknown_subcommand_is_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2
