"""
Excepciones de dominio del modelo de célula y del stack de reducción.

Los routers las traducen a HTTPException y el CLI a un JSON de error con código de salida != 0.
"""
from __future__ import annotations

from typing import Optional

import numpy as np


class CellModelError(Exception):
    """Base de todos los errores del dominio."""


class MeshError(CellModelError):
    """Malla, espacio o geometría inválidos."""


class AssemblyError(CellModelError):
    """Espacios o vectores de coeficientes incompatibles durante el ensamblado."""


class SolverError(CellModelError):
    """Fallo de un solver lineal o no lineal (factorización singular, etc.)."""


class ConvergenceError(SolverError):
    """Un método iterativo no convergió. Siempre lleva el mejor iterado alcanzado."""

    def __init__(
        self,
        message: str,
        best: Optional[np.ndarray] = None,
        residual_norm: float = float("nan"),
        iterations: int = 0,
    ):
        super().__init__(message)
        self.best = best
        self.residual_norm = residual_norm
        self.iterations = iterations


class StageError(CellModelError):
    """Un paso de tiempo abortado porque falló una de las tres etapas."""

    def __init__(self, stage: str, step: int, cause: Exception):
        super().__init__(f"Etapa '{stage}' falló en el paso {step}: {cause}")
        self.stage = stage
        self.step = step
        self.cause = cause


class HapodError(CellModelError):
    """Árbol HAPOD inválido o fallo de un worker."""


class DeimError(CellModelError):
    """Base colateral deficiente en rango o interpolante inválido."""


class ConfigError(CellModelError):
    """Configuración de corrida inválida."""
