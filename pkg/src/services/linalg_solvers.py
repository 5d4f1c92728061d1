"""
Solvers lineales: factorizaciones directas, ILU, GMRES reiniciado, CG y los solvers tipo Schur.

Todos los métodos iterativos recalculan el residuo verdadero antes de declarar convergencia; si no
alcanzan la tolerancia lanzan ConvergenceError con el mejor iterado.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from ..exceptions import ConvergenceError, SolverError

logger = logging.getLogger(__name__)

Operator = Union[sparse.spmatrix, np.ndarray, spla.LinearOperator]


@dataclass
class SolverStats:
    """Tiempos e iteraciones acumulados por un solver a lo largo de una corrida."""

    setup_seconds: float = 0.0
    solve_seconds: list[float] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    factorizations: int = 0

    def record(self, seconds: float, iterations: int) -> None:
        self.solve_seconds.append(seconds)
        self.iterations.append(iterations)

    @property
    def n_solves(self) -> int:
        return len(self.solve_seconds)

    @property
    def mean_iterations(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else float("nan")

    @property
    def mean_solve_seconds(self) -> float:
        return float(np.mean(self.solve_seconds)) if self.solve_seconds else float("nan")


@dataclass
class IterativeResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


# --- Factorizaciones ---


class Factorization:
    """Factorización dispersa (SuperLU) inmutable tras el setup."""

    def __init__(self, lu: spla.SuperLU, kind: str):
        self._lu = lu
        self.kind = kind
        self.shape = lu.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(self.shape, matvec=self.solve, dtype=float)


def lu_factorize(m: sparse.spmatrix) -> Factorization:
    if m.shape[0] != m.shape[1]:
        raise SolverError(f"La matriz no es cuadrada: {m.shape}")
    try:
        return Factorization(spla.splu(sparse.csc_matrix(m)), "lu")
    except RuntimeError as e:
        raise SolverError(f"Matriz singular en la factorización LU: {e}") from e


def cholesky_factorize(m: sparse.spmatrix) -> Factorization:
    """
    Factorización simétrica para matrices SPD. No es un Cholesky LLᵀ: es la LU de SuperLU en modo
    simétrico (ordenamiento de A + Aᵀ, sin pivoteo de filas), es decir L·(D Lᵀ) con U = D Lᵀ. Una
    diagonal de U no positiva indica que la matriz no es SPD.
    """
    m = sparse.csc_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise SolverError(f"La matriz no es cuadrada: {m.shape}")
    scale = abs(m).max() if m.nnz else 0.0
    if m.nnz and abs(m - m.T).max() > 1e-12 * scale:
        raise SolverError("Cholesky requiere una matriz simétrica")
    try:
        lu = spla.splu(
            m,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        raise SolverError(f"Matriz singular en la factorización de Cholesky: {e}") from e
    if np.any(lu.U.diagonal() <= 0.0):
        raise SolverError("La matriz no es definida positiva")
    return Factorization(lu, "ldlt")


class IncompleteLU:
    """Precondicionador ILU con umbral (spilu); los pivotes nulos se desplazan en 1e-12·‖fila‖."""

    def __init__(self, m: sparse.spmatrix, fill_factor: float = 80, drop_tol: float = 1e-6):
        m = sparse.csc_matrix(m, dtype=float)
        self.shape = m.shape
        m = self._shift_zero_pivots(m, only_zero=True)
        try:
            self._ilu = spla.spilu(m, drop_tol=drop_tol, fill_factor=fill_factor)
        except RuntimeError:
            logger.warning("[ILU] Pivote nulo, reintentando con la diagonal desplazada")
            try:
                self._ilu = spla.spilu(
                    self._shift_zero_pivots(m, only_zero=False), drop_tol=drop_tol, fill_factor=fill_factor
                )
            except RuntimeError as e:
                raise SolverError(f"ILU falló incluso con desplazamiento diagonal: {e}") from e

    @staticmethod
    def _shift_zero_pivots(m: sparse.csc_matrix, only_zero: bool) -> sparse.csc_matrix:
        diagonal = m.diagonal()
        targets = diagonal == 0.0 if only_zero else np.ones_like(diagonal, dtype=bool)
        if not np.any(targets):
            return m
        row_norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
        shift = np.where(targets, 1e-12 * np.maximum(row_norms, 1.0), 0.0)
        return (m + sparse.diags(shift)).tocsc()

    def apply(self, b: np.ndarray) -> np.ndarray:
        return self._ilu.solve(np.asarray(b, dtype=float))

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(self.shape, matvec=self.apply, dtype=float)


def ilu_incomplete(m: sparse.spmatrix, fill_factor: float = 80, drop_tol: float = 1e-6) -> IncompleteLU:
    return IncompleteLU(m, fill_factor=fill_factor, drop_tol=drop_tol)


Preconditioner = Union[IncompleteLU, Factorization]


# --- Métodos de Krylov ---


def _residual_norm(op: spla.LinearOperator, x: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(b - op.matvec(x)))


def gmres(
    op: Operator,
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    rtol: float = 1e-10,
    restart: int = 100,
    precond: Optional[Preconditioner] = None,
    max_restarts: int = 10,
) -> IterativeResult:
    """GMRES(restart) con hasta `max_restarts` ciclos; la iteración cuenta pasos internos."""
    a = spla.aslinearoperator(op)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return IterativeResult(np.zeros_like(b), 0, 0.0)
    target = rtol * b_norm
    m = precond.as_operator() if precond is not None else None
    count = [0]

    def _callback(_):
        count[0] += 1

    residual = _residual_norm(a, x, b)
    for _ in range(max_restarts):
        if residual <= target:
            break
        x, _info = spla.gmres(
            a, b, x0=x, rtol=rtol, atol=0.0, restart=restart, maxiter=1, M=m,
            callback=_callback, callback_type="pr_norm",
        )
        residual = _residual_norm(a, x, b)
    if residual > target:
        raise ConvergenceError(
            f"GMRES no convergió: ‖r‖={residual:.3e} > {target:.3e} tras {count[0]} iteraciones",
            best=x, residual_norm=residual, iterations=count[0],
        )
    return IterativeResult(x, count[0], residual)


def cg(
    op: Operator,
    b: np.ndarray,
    x0: Optional[np.ndarray] = None,
    rtol: float = 1e-10,
    precond: Optional[Preconditioner] = None,
    maxiter: Optional[int] = None,
    max_attempts: int = 3,
) -> IterativeResult:
    """CG precondicionado; se reinicia desde el iterado si el residuo verdadero no cumple la cota."""
    a = spla.aslinearoperator(op)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return IterativeResult(np.zeros_like(b), 0, 0.0)
    target = rtol * b_norm
    m = precond.as_operator() if precond is not None else None
    maxiter = maxiter or 10 * b.size
    count = [0]

    def _callback(_):
        count[0] += 1

    residual = _residual_norm(a, x, b)
    for _ in range(max_attempts):
        if residual <= target:
            break
        x, _info = spla.cg(a, b, x0=x, rtol=rtol, atol=0.0, maxiter=maxiter, M=m, callback=_callback)
        residual = _residual_norm(a, x, b)
    if residual > target:
        raise ConvergenceError(
            f"CG no convergió: ‖r‖={residual:.3e} > {target:.3e} tras {count[0]} iteraciones",
            best=x, residual_norm=residual, iterations=count[0],
        )
    return IterativeResult(x, count[0], residual)


# --- Solvers tipo Schur ---


def ofield_schur_solve(
    mass: sparse.spmatrix,
    top_left: sparse.spmatrix,
    coupling: sparse.spmatrix,
    dt: float,
    kappa: float,
    b: np.ndarray,
    mass_factor: Optional[Factorization] = None,
    rtol: float = 1e-10,
    restart: int = 100,
    max_restarts: int = 10,
) -> IterativeResult:
    """
    Resuelve [[T, (Δt/κ)M], [G, M]] x = b con T = M + Δt·B_of usando
    J = [[I, (Δt/κ)I], [0, I]] · [[S, 0], [G, M]],  S = T − (Δt/κ)G.
    El complemento de Schur no contiene inversas y se resuelve con GMRES sin precondicionar.
    """
    n = mass.shape[0]
    scale = dt / kappa
    b1, b2 = b[:n], b[n:]
    schur = sparse.csr_matrix(top_left - scale * coupling)
    first = gmres(schur, b1 - scale * b2, rtol=rtol, restart=restart, max_restarts=max_restarts)
    factor = mass_factor or cholesky_factorize(mass)
    second = factor.solve(b2 - coupling @ first.x)
    x = np.concatenate([first.x, second])
    return IterativeResult(x, first.iterations, first.residual_norm)


def ofield_schur_factors(
    mass: sparse.spmatrix, top_left: sparse.spmatrix, coupling: sparse.spmatrix, dt: float, kappa: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Los tres factores densos de J_of (instancias pequeñas)."""
    n = mass.shape[0]
    scale = dt / kappa
    eye = np.eye(n)
    m, g = mass.toarray(), coupling.toarray()
    left = np.block([[eye, scale * eye], [np.zeros((n, n)), eye]])
    middle = np.block([[top_left.toarray() - scale * g, np.zeros((n, n))], [np.zeros((n, n)), m]])
    right = np.block([[eye, np.zeros((n, n))], [np.linalg.solve(m, g), eye]])
    return left, middle, right


@dataclass
class StokesSolution:
    u: np.ndarray
    p: np.ndarray
    iterations: int


def _zero_mean(p: np.ndarray, lumped_pressure_mass: np.ndarray) -> np.ndarray:
    return p - (lumped_pressure_mass @ p) / lumped_pressure_mass.sum()


def _pinned(n_p: int, pin: int) -> np.ndarray:
    keep = np.ones(n_p, dtype=bool)
    keep[pin] = False
    return np.flatnonzero(keep)


def stokes_schur_solve(
    a: sparse.spmatrix,
    b: sparse.spmatrix,
    pressure_mass: sparse.spmatrix,
    rhs_u: np.ndarray,
    rhs_p: Optional[np.ndarray] = None,
    a_factor: Optional[Factorization] = None,
    pressure_factor: Optional[Factorization] = None,
    rtol: float = 1e-10,
    pin: int = 0,
) -> StokesSolution:
    """
    CG sobre B A⁻¹ Bᵀ precondicionado con la masa de presión. El DOF `pin` se fija a cero durante la
    resolución y la presión se desplaza a media nula al final.
    """
    n_p = b.shape[0]
    rhs_p = np.zeros(n_p) if rhs_p is None else rhs_p
    keep = _pinned(n_p, pin)
    b_kept = sparse.csr_matrix(b[keep])
    a_factor = a_factor or cholesky_factorize(a)
    pressure_factor = pressure_factor or cholesky_factorize(pressure_mass[keep][:, keep])

    schur = spla.LinearOperator(
        (keep.size, keep.size), matvec=lambda v: b_kept @ a_factor.solve(b_kept.T @ v), dtype=float
    )
    g = b_kept @ a_factor.solve(rhs_u) - rhs_p[keep]
    g_norm = float(np.linalg.norm(g))
    rhs_norm = float(np.hypot(np.linalg.norm(rhs_u), np.linalg.norm(rhs_p)))
    # ‖B u − rhs_p‖ es el residuo de CG: se exige también relativo a la carga original
    scale = min(1.0, rhs_norm / g_norm) if g_norm > 0 else 1.0
    result = cg(schur, g, rtol=rtol * scale, precond=pressure_factor)
    p = np.zeros(n_p)
    p[keep] = result.x
    u = a_factor.solve(rhs_u - b.T @ p)
    lumped = np.asarray(pressure_mass.sum(axis=1)).ravel()
    return StokesSolution(u, _zero_mean(p, lumped), result.iterations)


# --- Estrategias por etapa (con estadísticas para el benchmark) ---


def _timed(stats: SolverStats, solve: Callable[[], tuple[np.ndarray, int]]) -> np.ndarray:
    start = time.perf_counter()
    x, iterations = solve()
    stats.record(time.perf_counter() - start, iterations)
    return x


class PhaseFieldJacobianSolver:
    """
    Resuelve J_pf δ = rhs. `gmres-ilu` factoriza Ĵ_pf una única vez por corrida; `direct` hace LU de
    la jacobiana en cada iteración de Newton.
    """

    def __init__(
        self,
        kind: str,
        preconditioner_matrix: Optional[sparse.spmatrix] = None,
        rtol: float = 1e-10,
        restart: int = 100,
        max_restarts: int = 10,
        fill_factor: float = 80,
        drop_tol: float = 1e-6,
    ):
        if kind not in ("gmres-ilu", "direct"):
            raise SolverError(f"Solver de campo de fase desconocido: {kind}")
        self.kind = kind
        self.stats = SolverStats()
        self._rtol, self._restart, self._max_restarts = rtol, restart, max_restarts
        self._ilu: Optional[IncompleteLU] = None
        if kind == "gmres-ilu":
            if preconditioner_matrix is None:
                raise SolverError("gmres-ilu necesita la matriz del precondicionador")
            start = time.perf_counter()
            self._ilu = ilu_incomplete(preconditioner_matrix, fill_factor=fill_factor, drop_tol=drop_tol)
            self.stats.setup_seconds += time.perf_counter() - start
            self.stats.factorizations += 1

    def solve(self, jacobian: sparse.spmatrix, rhs: np.ndarray) -> np.ndarray:
        if self.kind == "direct":
            def _direct():
                start = time.perf_counter()
                factor = lu_factorize(jacobian)
                self.stats.setup_seconds += time.perf_counter() - start
                self.stats.factorizations += 1
                return factor.solve(rhs), 1

            return _timed(self.stats, _direct)

        def _iterative():
            result = gmres(
                jacobian, rhs, rtol=self._rtol, restart=self._restart,
                precond=self._ilu, max_restarts=self._max_restarts,
            )
            return result.x, result.iterations

        return _timed(self.stats, _iterative)


class OrientationJacobianSolver:
    """Resuelve J_of δ = rhs con `schur-gmres`, `gmres` (J completa, sin precondicionar) o `direct`."""

    def __init__(
        self,
        kind: str,
        mass: sparse.spmatrix,
        dt: float,
        kappa: float,
        rtol: float = 1e-10,
        restart: int = 100,
        max_restarts: int = 10,
    ):
        if kind not in ("schur-gmres", "gmres", "direct"):
            raise SolverError(f"Solver de orientación desconocido: {kind}")
        self.kind = kind
        self.stats = SolverStats()
        self._mass, self._dt, self._kappa = mass, dt, kappa
        self._rtol, self._restart, self._max_restarts = rtol, restart, max_restarts
        self._mass_factor: Optional[Factorization] = None
        if kind == "schur-gmres":
            start = time.perf_counter()
            self._mass_factor = cholesky_factorize(mass)
            self.stats.setup_seconds += time.perf_counter() - start
            self.stats.factorizations += 1

    def solve(self, top_left: sparse.spmatrix, coupling: sparse.spmatrix, rhs: np.ndarray) -> np.ndarray:
        if self.kind == "schur-gmres":
            def _schur():
                result = ofield_schur_solve(
                    self._mass, top_left, coupling, self._dt, self._kappa, rhs,
                    mass_factor=self._mass_factor, rtol=self._rtol,
                    restart=self._restart, max_restarts=self._max_restarts,
                )
                return result.x, result.iterations

            return _timed(self.stats, _schur)

        jacobian = sparse.bmat(
            [[top_left, (self._dt / self._kappa) * self._mass], [coupling, self._mass]], format="csr"
        )
        if self.kind == "direct":
            def _direct():
                start = time.perf_counter()
                factor = lu_factorize(jacobian)
                self.stats.setup_seconds += time.perf_counter() - start
                self.stats.factorizations += 1
                return factor.solve(rhs), 1

            return _timed(self.stats, _direct)

        def _full():
            result = gmres(jacobian, rhs, rtol=self._rtol, restart=self._restart, max_restarts=self._max_restarts)
            return result.x, result.iterations

        return _timed(self.stats, _full)


class StokesSolver:
    """
    Sistema de Stokes con matrices independientes del tiempo: todas las factorizaciones se hacen una
    vez en el setup (`schur-cg`: A y masa de presión; `direct`: el sistema de punto silla fijado).
    """

    def __init__(
        self,
        kind: str,
        laplacian: sparse.spmatrix,
        divergence: sparse.spmatrix,
        pressure_mass: sparse.spmatrix,
        rtol: float = 1e-10,
        pin: int = 0,
    ):
        if kind not in ("schur-cg", "direct"):
            raise SolverError(f"Solver de Stokes desconocido: {kind}")
        self.kind = kind
        self.stats = SolverStats()
        self._a, self._b, self._mp = laplacian, sparse.csr_matrix(divergence), pressure_mass
        self._rtol, self._pin = rtol, pin
        self._lumped = np.asarray(pressure_mass.sum(axis=1)).ravel()
        self._keep = _pinned(divergence.shape[0], pin)

        start = time.perf_counter()
        if kind == "schur-cg":
            self._a_factor = cholesky_factorize(laplacian)
            self._p_factor = cholesky_factorize(pressure_mass[self._keep][:, self._keep])
            self.stats.factorizations += 2
        else:
            b_kept = self._b[self._keep]
            saddle = sparse.bmat([[laplacian, b_kept.T], [b_kept, None]], format="csc")
            self._saddle = lu_factorize(saddle)
            self.stats.factorizations += 1
        self.stats.setup_seconds += time.perf_counter() - start

    def solve(self, rhs_u: np.ndarray, rhs_p: Optional[np.ndarray] = None) -> StokesSolution:
        n_u, n_p = self._a.shape[0], self._b.shape[0]
        rhs_p = np.zeros(n_p) if rhs_p is None else rhs_p
        start = time.perf_counter()
        if self.kind == "schur-cg":
            solution = stokes_schur_solve(
                self._a, self._b, self._mp, rhs_u, rhs_p,
                a_factor=self._a_factor, pressure_factor=self._p_factor, rtol=self._rtol, pin=self._pin,
            )
        else:
            x = self._saddle.solve(np.concatenate([rhs_u, rhs_p[self._keep]]))
            p = np.zeros(n_p)
            p[self._keep] = x[n_u:]
            solution = StokesSolution(x[:n_u], _zero_mean(p, self._lumped), 1)
        self.stats.record(time.perf_counter() - start, solution.iterations)
        return solution
