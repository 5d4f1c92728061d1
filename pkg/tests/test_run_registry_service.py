import json
import logging

from sqlalchemy.orm import sessionmaker

from src.database import create_tables, make_engine
from src.schemas.run_config_schema import RunConfig
from src.services import run_registry_service
from src.services.run_registry_service import RunRegistry


def test_run_lifecycle(registry_db):
    registry = RunRegistry()
    run_id = registry.start("simulate", RunConfig(output_dir="out/a"))
    assert run_id is not None

    registry.mark_running(run_id)
    registry.finish(run_id, {"command": "simulate", "mass_drift": float("nan"), "files": ["summary.json"]})

    db = registry_db()
    try:
        run = run_registry_service.get_run(db, run_id)
        assert run.status == "FINISHED"
        assert run.output_dir == "out/a"
        assert run.slug.startswith("simulate-circle-")
        assert run.finished_at is not None
        assert json.loads(run.summary_json)["mass_drift"] is None
        detail = run_registry_service.run_detail(run)
        assert detail["config"]["output_dir"] == "out/a"
    finally:
        db.close()


def test_failure_and_listing(registry_db):
    registry = RunRegistry()
    first = registry.start("build-rb", RunConfig())
    second = registry.start("simulate", RunConfig())
    registry.fail(second, "StageError: Etapa 'ofield' falló en el paso 3")

    db = registry_db()
    try:
        runs = run_registry_service.list_runs(db)
        assert [r.id for r in runs] == [second, first]
        assert [r.id for r in run_registry_service.list_runs(db, command="build-rb")] == [first]
        failed = run_registry_service.get_run(db, second)
        assert failed.status == "FAILED"
        assert "ofield" in failed.error_message
    finally:
        db.close()


def test_benchmark_records_are_stored_on_finish(registry_db):
    registry = RunRegistry()
    run_id = registry.start("benchmark-solvers", RunConfig())
    record = {
        "grid": 64, "n_elements": 128, "stage": "stokes", "solver": "direct", "mean_iterations": 1.0,
        "setup_seconds": 0.01, "mean_solve_seconds": float("nan"), "peak_memory_bytes": 123456789,
    }
    registry.finish(run_id, {"command": "benchmark-solvers", "records": [record]})

    db = registry_db()
    try:
        (stored,) = run_registry_service.list_benchmarks(db, run_id)
        assert (stored.grid, stored.stage, stored.solver) == (64, "stokes", "direct")
        assert stored.mean_solve_seconds is None
        assert stored.peak_memory_bytes == 123456789
    finally:
        db.close()


def test_registry_failures_are_logged_not_raised(tmp_path, caplog):
    # la base apunta a un directorio inexistente: toda escritura falla
    engine = make_engine(f"sqlite:///{tmp_path / 'missing' / 'runs.db'}")
    registry = RunRegistry(sessionmaker(bind=engine))
    with caplog.at_level(logging.WARNING):
        run_id = registry.start("simulate", RunConfig())
        registry.finish(1, {"command": "simulate"})
    assert run_id is None
    assert "[Registry]" in caplog.text


def test_none_run_id_is_a_no_op(registry_db):
    registry = RunRegistry()
    registry.mark_running(None)
    registry.finish(None, {"command": "simulate"})
    registry.fail(None, "x")
    db = registry_db()
    try:
        assert run_registry_service.list_runs(db) == []
    finally:
        db.close()


def test_create_tables_is_idempotent(tmp_path):
    engine = make_engine(f"sqlite:///{tmp_path / 'x.db'}")
    create_tables(bind=engine)
    create_tables(bind=engine)
    engine.dispose()


def test_infinite_summary_values_are_stored_as_null(registry_db):
    registry = RunRegistry()
    run_id = registry.start("evaluate-rom", RunConfig(output_dir="out/inf"))
    summary = {"command": "evaluate-rom", "errors": [{"abs_error": float("inf"), "rel_error": float("-inf")}]}
    registry.fail(run_id, "Gauss-Newton no convergió", summary)

    db = registry_db()
    try:
        stored = run_registry_service.get_run(db, run_id).summary_json
        assert "Infinity" not in stored
        assert json.loads(stored)["errors"] == [{"abs_error": None, "rel_error": None}]
    finally:
        db.close()
