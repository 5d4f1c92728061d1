"""
Registro de corridas en la base de datos. Un fallo del registro se loguea y nunca interrumpe el cálculo.
"""
import json
import logging
from contextlib import contextmanager
from datetime import datetime
from typing import Callable, Optional

from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session

from ..database import SessionLocal
from ..models.benchmark_result import BenchmarkResult
from ..models.experiment_run import ExperimentRun
from ..schemas.run_config_schema import RunConfig
from ..schemas.run_schema import (
    RUN_STATUS_FAILED,
    RUN_STATUS_FINISHED,
    RUN_STATUS_PENDING,
    RUN_STATUS_RUNNING,
)
from ..utils import run_slug
from .output_service import json_safe

logger = logging.getLogger(__name__)


def _dumps(payload: dict) -> str:
    return json.dumps(json_safe(payload), sort_keys=True, default=str, allow_nan=False)


class RunRegistry:
    def __init__(self, session_factory: Optional[Callable[[], Session]] = None):
        self._factory = session_factory or SessionLocal

    @contextmanager
    def _session(self, action: str):
        db = None
        try:
            db = self._factory()
            yield db
            db.commit()
        except SQLAlchemyError as e:
            logger.warning(f"[Registry] ⚠️ No se pudo {action}: {e}")
            if db is not None:
                db.rollback()
        finally:
            if db is not None:
                db.close()

    def start(self, command: str, config: RunConfig, slug: Optional[str] = None) -> Optional[int]:
        run_id = None
        with self._session("registrar la corrida") as db:
            run = ExperimentRun(
                slug=slug or run_slug(command, config.scenario.name),
                command=command,
                status=RUN_STATUS_PENDING,
                config_json=config.model_dump_json(),
                output_dir=config.output_dir,
            )
            db.add(run)
            db.flush()
            pending, slug = run.id, run.slug
            db.commit()
            # sólo se devuelve el id de una corrida efectivamente guardada
            run_id = pending
            logger.info(f"[Registry] Corrida {slug} registrada (id={run_id})")
        return run_id

    def _update(self, run_id: Optional[int], action: str, **values) -> None:
        if run_id is None:
            return
        with self._session(action) as db:
            run = db.get(ExperimentRun, run_id)
            if run is None:
                logger.warning(f"[Registry] Corrida {run_id} inexistente")
                return
            for key, value in values.items():
                setattr(run, key, value)

    def mark_running(self, run_id: Optional[int]) -> None:
        self._update(run_id, "marcar la corrida en curso", status=RUN_STATUS_RUNNING)

    def finish(self, run_id: Optional[int], summary: dict) -> None:
        self._update(
            run_id, "cerrar la corrida", status=RUN_STATUS_FINISHED,
            summary_json=_dumps(summary), finished_at=datetime.utcnow(),
        )
        if summary.get("command") == "benchmark-solvers":
            self.record_benchmarks(run_id, summary.get("records", []))

    def fail(self, run_id: Optional[int], error: str, summary: Optional[dict] = None) -> None:
        self._update(
            run_id, "marcar la corrida fallida", status=RUN_STATUS_FAILED, error_message=error,
            summary_json=_dumps(summary) if summary else None, finished_at=datetime.utcnow(),
        )

    def record_benchmarks(self, run_id: Optional[int], records: list[dict]) -> None:
        if run_id is None or not records:
            return
        with self._session("guardar el benchmark") as db:
            for r in records:
                db.add(
                    BenchmarkResult(
                        run_id=run_id,
                        grid=r["grid"],
                        n_elements=r["n_elements"],
                        stage=r["stage"],
                        solver=r["solver"],
                        mean_iterations=_finite(r.get("mean_iterations")),
                        setup_seconds=_finite(r.get("setup_seconds")),
                        mean_solve_seconds=_finite(r.get("mean_solve_seconds")),
                        peak_memory_bytes=r.get("peak_memory_bytes"),
                    )
                )


def _finite(value) -> Optional[float]:
    if value is None or value != value:
        return None
    return float(value)


# --- consultas (sesión inyectada por FastAPI) ---


def list_runs(db: Session, command: Optional[str] = None, limit: int = 50) -> list[ExperimentRun]:
    query = db.query(ExperimentRun)
    if command:
        query = query.filter(ExperimentRun.command == command)
    return query.order_by(ExperimentRun.id.desc()).limit(limit).all()


def get_run(db: Session, run_id: int) -> Optional[ExperimentRun]:
    return db.get(ExperimentRun, run_id)


def run_detail(run: ExperimentRun) -> dict:
    return {
        "id": run.id,
        "slug": run.slug,
        "command": run.command,
        "status": run.status,
        "output_dir": run.output_dir,
        "error_message": run.error_message,
        "created_at": run.created_at,
        "finished_at": run.finished_at,
        "config": json.loads(run.config_json) if run.config_json else None,
        "summary": json.loads(run.summary_json) if run.summary_json else None,
    }


def list_benchmarks(db: Session, run_id: int) -> list[BenchmarkResult]:
    return (
        db.query(BenchmarkResult)
        .filter(BenchmarkResult.run_id == run_id)
        .order_by(BenchmarkResult.id.asc())
        .all()
    )
