from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.orm import relationship

from ..database import Base


class ExperimentRun(Base):
    """Una ejecución de un comando (CLI o API) con su configuración y resumen."""

    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    slug = Column(String(200), unique=True, index=True, nullable=False)
    command = Column(String(50), index=True, nullable=False)  # simulate, benchmark-solvers, build-rb, evaluate-rom
    status = Column(String(20), default="PENDING")  # PENDING, RUNNING, FINISHED, FAILED
    config_json = Column(Text, nullable=False)
    summary_json = Column(Text, nullable=True)
    error_message = Column(Text, nullable=True)
    output_dir = Column(String(500), nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    benchmarks = relationship("BenchmarkResult", back_populates="run", cascade="all, delete-orphan")
