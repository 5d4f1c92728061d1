from typing import List, Optional

from fastapi import APIRouter, Depends, HTTPException, Query
from sqlalchemy.orm import Session

from ..database import get_db
from ..schemas.benchmark_schema import BenchmarkResultOut
from ..schemas.run_schema import RunDetailOut, RunOut
from ..services import run_registry_service

router = APIRouter(prefix="/runs", tags=["runs"])


def _get_run_or_404(db: Session, run_id: int):
    run = run_registry_service.get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Corrida no encontrada")
    return run


@router.get("", response_model=List[RunOut])
def list_runs(
    command: Optional[str] = Query(default=None, description="Filtrar por comando (simulate, build-rb, ...)"),
    limit: int = Query(default=50, ge=1, le=500),
    db: Session = Depends(get_db),
):
    return run_registry_service.list_runs(db, command, limit)


@router.get("/{run_id}", response_model=RunDetailOut)
def get_run(run_id: int, db: Session = Depends(get_db)):
    return run_registry_service.run_detail(_get_run_or_404(db, run_id))


@router.get("/{run_id}/benchmarks", response_model=List[BenchmarkResultOut])
def list_run_benchmarks(run_id: int, db: Session = Depends(get_db)):
    _get_run_or_404(db, run_id)
    return run_registry_service.list_benchmarks(db, run_id)
