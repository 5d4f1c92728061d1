import pytest
from fastapi.testclient import TestClient

from src.database import get_db
from src.main import app


@pytest.fixture
def client(registry_db, tmp_path, monkeypatch):
    monkeypatch.setenv("CELLMOR_OUTPUT_DIR", str(tmp_path / "api-results"))

    def _get_db():
        db = registry_db()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = _get_db
    with TestClient(app) as c:
        yield c
    app.dependency_overrides.clear()


def _body(tiny_config, **update):
    return tiny_config.model_copy(update=update).model_dump(mode="json")


def test_health_and_ping(client):
    assert client.get("/api/health").json()["status"] == "ok"
    assert client.get("/api/ping").json()["pong"] is True


def test_simulate_run_is_registered_and_finished(client, tiny_config, tmp_path):
    response = client.post("/api/experiments/simulate", json=_body(tiny_config, t_end=0.0))
    assert response.status_code == 202
    launched = response.json()
    assert launched["status"] == "PENDING"
    assert launched["output_dir"].startswith(str(tmp_path / "api-results"))
    assert launched["slug"].startswith("simulate-custom-")

    # TestClient ejecuta la tarea en segundo plano antes de devolver la respuesta
    detail = client.get(f"/api/runs/{launched['id']}").json()
    assert detail["status"] == "FINISHED"
    assert detail["summary"]["completed_steps"] == 0
    assert detail["config"]["t_end"] == 0.0

    runs = client.get("/api/runs", params={"command": "simulate"}).json()
    assert [r["id"] for r in runs] == [launched["id"]]
    assert client.get("/api/runs", params={"command": "build-rb"}).json() == []


def test_benchmark_rows_are_queryable(client, tiny_config):
    launched = client.post("/api/experiments/benchmark-solvers", json=_body(tiny_config)).json()
    rows = client.get(f"/api/runs/{launched['id']}/benchmarks").json()
    assert [(r["stage"], r["solver"]) for r in rows] == [("stokes", "schur-cg"), ("stokes", "direct")]
    assert all(r["grid"] == 64 for r in rows)


def test_failed_command_is_marked_failed(client, tiny_config, tmp_path):
    mor = tiny_config.mor.model_copy(update={"basis_dir": str(tmp_path / "no-bases")})
    launched = client.post("/api/experiments/evaluate-rom", json=_body(tiny_config, mor=mor)).json()
    detail = client.get(f"/api/runs/{launched['id']}").json()
    assert detail["status"] == "FAILED"
    assert detail["error_message"].startswith("ConfigError")


def test_invalid_requests_return_422(client, tiny_config):
    assert client.post("/api/experiments/train", json=_body(tiny_config)).status_code == 422
    body = _body(tiny_config)
    body["mesh"]["layers"] = 3
    assert client.post("/api/experiments/simulate", json=body).status_code == 422


def test_missing_run_is_404(client):
    assert client.get("/api/runs/999").status_code == 404
    assert client.get("/api/runs/999/benchmarks").status_code == 404
