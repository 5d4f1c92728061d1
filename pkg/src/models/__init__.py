# Importar todos los modelos para que create_all() registre sus tablas
from .experiment_run import ExperimentRun
from .benchmark_result import BenchmarkResult

__all__ = [
    "ExperimentRun",
    "BenchmarkResult",
]
