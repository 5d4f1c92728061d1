from sqlalchemy import BigInteger, Column, Float, ForeignKey, Integer, String
from sqlalchemy.orm import relationship

from ..database import Base


class BenchmarkResult(Base):
    __tablename__ = "benchmark_results"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False, index=True)
    grid = Column(Integer, nullable=False)  # celdas nx·ny
    n_elements = Column(Integer, nullable=False)
    stage = Column(String(20), nullable=False)
    solver = Column(String(30), nullable=False)
    mean_iterations = Column(Float, nullable=True)
    setup_seconds = Column(Float, nullable=True)
    mean_solve_seconds = Column(Float, nullable=True)
    peak_memory_bytes = Column(BigInteger, nullable=True)

    run = relationship("ExperimentRun", back_populates="benchmarks")
