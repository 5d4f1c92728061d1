from typing import Optional

from pydantic import BaseModel


class BenchmarkRecord(BaseModel):
    """Una fila de la tabla de solvers: un solver de una etapa sobre una grilla."""

    grid: int  # celdas nx·ny
    n_elements: int
    stage: str
    solver: str
    n_solves: int
    mean_iterations: float
    mean_newton_iterations: float
    setup_seconds: float
    mean_solve_seconds: float
    peak_memory_bytes: Optional[int] = None  # best-effort, depende del sistema
    error: Optional[str] = None


class BenchmarkResultOut(BaseModel):
    id: int
    run_id: int
    grid: int
    n_elements: int
    stage: str
    solver: str
    mean_iterations: Optional[float]
    setup_seconds: Optional[float]
    mean_solve_seconds: Optional[float]
    peak_memory_bytes: Optional[int]

    model_config = {"from_attributes": True}
