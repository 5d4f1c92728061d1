"""
Modelo reducido por minimización de residuo: bases de estado V por campo, interpolación DEIM de los
residuos de etapa con bases colaterales C y evaluación restringida a los vecindarios de los DOFs de
interpolación.

Cada etapa reducida minimiza ‖(ZᵀC)⁻¹ Zᵀ r(V x̄)‖₂ con Gauss-Newton. Sin DEIM se minimiza el residuo
completo en norma euclídea. Los campos sin base se avanzan con los solvers del modelo completo.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy import sparse

from ..exceptions import ConvergenceError, DeimError, SolverError, StageError
from ..schemas.model_parameters_schema import ModelParameters
from ..schemas.run_config_schema import SolverSettings
from .assembly import FIELDS, CellDiscretization
from .cell_dynamics import (
    CellModel,
    OrientationSystem,
    PhaseFieldSystem,
    State,
    StokesSystem,
    split_ofield,
    split_pfield,
    split_stokes,
)
from .pod_hapod import IDENTITY, InnerProduct, orth_project

logger = logging.getLogger(__name__)

DEIM_RANK_TOL = 1e-12
RANK_TOL = 1e-12
STEP_TOL = 1e-12
STATIONARITY_TOL = 1e-10
CORRECTION_TOL = 1e-10


# --- DEIM ---


def deim_select(basis: np.ndarray) -> np.ndarray:
    """
    Selección greedy: el primer DOF maximiza |c₁|; el j-ésimo maximiza el residuo de interpolar c_j con
    las columnas y DOFs anteriores.
    """
    basis = np.asarray(basis, dtype=float)
    if basis.ndim != 2 or basis.shape[1] == 0:
        raise DeimError(f"Base colateral vacía o mal formada: {basis.shape}")
    n, m = basis.shape
    if m > n:
        raise DeimError(f"La base colateral tiene más columnas ({m}) que filas ({n})")
    dofs = np.zeros(m, dtype=int)
    for j in range(m):
        column = basis[:, j]
        if j == 0:
            residual = column
        else:
            coeffs = scipy.linalg.solve(basis[dofs[:j], :j], column[dofs[:j]])
            residual = column - basis[:, :j] @ coeffs
        pivot = int(np.argmax(np.abs(residual)))
        if abs(residual[pivot]) <= DEIM_RANK_TOL * max(np.max(np.abs(column)), 1e-300):
            raise DeimError(f"Base colateral de rango deficiente: la columna {j} depende de las anteriores")
        dofs[j] = pivot
    return dofs


@dataclass(frozen=True)
class DeimInterpolant:
    basis: np.ndarray
    dofs: np.ndarray
    inverse: np.ndarray

    @property
    def n_dofs(self) -> int:
        return int(self.dofs.size)

    def coefficients(self, values: np.ndarray) -> np.ndarray:
        """(ZᵀC)⁻¹ Zᵀ r a partir de r en los DOFs."""
        return self.inverse @ values

    def reconstruct(self, values: np.ndarray) -> np.ndarray:
        return self.basis @ self.coefficients(values)


def build_interpolant(basis: np.ndarray, dofs: Optional[np.ndarray] = None) -> DeimInterpolant:
    dofs = deim_select(basis) if dofs is None else np.asarray(dofs, dtype=int)
    if np.unique(dofs).size != dofs.size:
        raise DeimError("DOFs de interpolación repetidos")
    try:
        inverse = scipy.linalg.inv(basis[dofs])
    except (np.linalg.LinAlgError, ValueError) as e:
        raise DeimError(f"ZᵀC singular: {e}") from e
    logger.debug(f"[DEIM] {dofs.size} DOFs de interpolación sobre {basis.shape[0]} filas")
    return DeimInterpolant(np.asarray(basis, dtype=float), dofs, inverse)


def deim_interpolate(interp: DeimInterpolant, values: np.ndarray, full: bool = False) -> np.ndarray:
    """Coeficientes (ZᵀC)⁻¹ r_Z, o la reconstrucción C (ZᵀC)⁻¹ r_Z con `full`."""
    return interp.reconstruct(values) if full else interp.coefficients(values)


# --- Evaluación restringida ---


class RestrictedEvaluator:
    """
    Evalúa las filas de interpolación del residuo de un campo recorriendo sólo los elementos que tocan
    esos DOFs. Guarda las filas de cada base V en los DOFs del vecindario.

    Sin interpolante es el evaluador completo: todas las filas, sin proyección.
    """

    def __init__(
        self,
        name: str,
        disc: CellDiscretization,
        bases: dict[str, np.ndarray],
        interp: Optional[DeimInterpolant] = None,
    ):
        self.name = name
        self.interp = interp
        if interp is None:
            self.disc = disc
            self.indices = {f: np.arange(disc.field_size(f)) for f in FIELDS}
            self.rows = None
            self.local_bases = dict(bases)
        else:
            stars = [disc.stacked_dof_star(name, int(i)) for i in interp.dofs]
            self.disc = disc.restrict(np.unique(np.concatenate(stars)))
            self.indices = {f: self.disc.stacked_global_indices(f) for f in FIELDS}
            own = self.indices[name]
            self.rows = np.searchsorted(own, interp.dofs)
            if np.any(self.rows >= own.size) or not np.array_equal(own[self.rows], interp.dofs):
                raise DeimError(f"Vecindario incompleto para los DOFs de '{name}'")
            self.local_bases = {f: v[self.indices[f]] for f, v in bases.items()}

    @property
    def n_elements(self) -> int:
        return int(self.disc.elements.size)

    def local(self, name: str, value: np.ndarray) -> np.ndarray:
        """Valores locales de un campo: V|_vecindario x̄ si está reducido, o el vector completo restringido."""
        if name in self.local_bases:
            return self.local_bases[name] @ value
        return value[self.indices[name]]

    def project(self, r: np.ndarray) -> np.ndarray:
        if self.interp is None:
            return r
        return self.interp.coefficients(r[self.rows])

    def project_jacobian(self, jac: sparse.spmatrix, basis: np.ndarray) -> np.ndarray:
        if self.interp is None:
            return np.asarray(jac @ basis)
        return self.interp.inverse @ np.asarray(jac[self.rows] @ basis)


def build_restricted_evaluator(
    name: str, disc: CellDiscretization, bases: dict[str, np.ndarray], interp: Optional[DeimInterpolant]
) -> RestrictedEvaluator:
    evaluator = RestrictedEvaluator(name, disc, bases, interp)
    logger.debug(
        f"[DEIM] {name}: {evaluator.n_elements} de {disc.mesh.n_elements} elementos en el vecindario"
    )
    return evaluator


# --- Gauss-Newton ---


@dataclass
class GaussNewtonResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


def _least_squares_step(jac: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Paso por QR densa con pivoteo; con rango deficiente o M < N, mínimos cuadrados de norma mínima."""
    m, n = jac.shape
    if n == 0:
        return np.zeros(0)
    if m >= n:
        q, r, perm = scipy.linalg.qr(jac, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        if diag[0] > 0 and diag[-1] > RANK_TOL * diag[0]:
            step = np.empty(n)
            step[perm] = scipy.linalg.solve_triangular(r, q.T @ rhs)
            return step
    return scipy.linalg.lstsq(jac, rhs, cond=RANK_TOL)[0]


def _stationary(jac: np.ndarray, rho: np.ndarray, norm: float, atol: float) -> bool:
    if norm <= atol:
        return True
    gradient = float(np.linalg.norm(jac.T @ rho))
    return gradient <= atol or gradient <= STATIONARITY_TOL * float(np.linalg.norm(jac)) * norm


def gauss_newton(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x_init: np.ndarray,
    atol: float = 1e-10,
    max_iter: int = 20,
    max_halvings: int = 10,
    affine: bool = False,
) -> GaussNewtonResult:
    """
    min ‖ρ(x̄)‖₂ con pasos de Gauss-Newton y backtracking: se acepta x̄ + λδ con el primer
    λ = 1, ½, ... que cumple ‖ρ(x̄+λδ)‖² ≤ ‖ρ‖² − 2·10⁻⁴ λ ‖Jδ‖².

    Siempre hay al menos una actualización. Se detiene cuando ‖ρ‖ o ‖Jᵀρ‖ son despreciables o cuando
    la corrección siguiente cae al nivel de redondeo. Con affine=True la jacobiana se evalúa una sola
    vez y se reutiliza.
    """
    x = np.array(x_init, dtype=float)
    rho = residual(x)
    norm = float(np.linalg.norm(rho))
    iterations = 0
    constant: Optional[np.ndarray] = None
    while True:
        if constant is not None:
            jac = constant
        else:
            jac = jacobian(x)
            if affine:
                constant = jac
        if iterations > 0 and _stationary(jac, rho, norm, atol):
            break
        delta = _least_squares_step(jac, -rho)
        if iterations > 0 and np.linalg.norm(delta) <= CORRECTION_TOL * (1.0 + np.linalg.norm(x)):
            break
        if iterations >= max_iter:
            raise ConvergenceError(
                f"Gauss-Newton no convergió en {max_iter} iteraciones (‖ρ‖={norm:.3e})",
                best=x, residual_norm=norm, iterations=iterations,
            )
        predicted = float(np.linalg.norm(jac @ delta)) ** 2
        step = 1.0
        for _ in range(max_halvings + 1):
            x_try = x + step * delta
            rho_try = residual(x_try)
            norm_try = float(np.linalg.norm(rho_try))
            if norm_try**2 <= norm**2 - 2e-4 * step * predicted:
                break
            step *= 0.5
        else:
            if np.linalg.norm(delta) <= STEP_TOL * (1.0 + np.linalg.norm(x)):
                # estancado en el nivel de redondeo
                iterations += 1
                break
            raise ConvergenceError(
                f"Backtracking de Gauss-Newton agotado (‖ρ‖={norm:.3e})",
                best=x, residual_norm=norm, iterations=iterations,
            )
        x, rho, norm = x_try, rho_try, norm_try
        iterations += 1
        logger.debug(f"[GaussNewton] it={iterations} ‖ρ‖={norm:.3e} λ={step:g}")
        if step * np.linalg.norm(delta) <= STEP_TOL * (1.0 + np.linalg.norm(x)):
            break
    return GaussNewtonResult(x, iterations, norm)


# --- Modelo reducido ---


@dataclass
class ReducedState:
    """Coeficientes x̄ para los campos reducidos, vector completo para los demás."""

    values: dict[str, np.ndarray]
    k: int = 0

    def field(self, name: str) -> np.ndarray:
        return self.values[name]


@dataclass(frozen=True)
class ReducedModel:
    """Bases, interpolantes y evaluadores restringidos; no depende del parámetro η."""

    disc: CellDiscretization
    bases: dict[str, np.ndarray]
    inner_products: dict[str, InnerProduct]
    interpolants: dict[str, Optional[DeimInterpolant]]
    evaluators: dict[str, RestrictedEvaluator]

    @property
    def reduced_fields(self) -> tuple[str, ...]:
        return tuple(f for f in FIELDS if f in self.bases)

    @property
    def uses_deim(self) -> bool:
        return any(i is not None for i in self.interpolants.values())

    def is_reduced(self, name: str) -> bool:
        return name in self.bases

    def dimensions(self) -> dict[str, int]:
        return {f: int(v.shape[1]) for f, v in self.bases.items()}

    def deim_sizes(self) -> dict[str, int]:
        return {f: i.n_dofs for f, i in self.interpolants.items() if i is not None}

    def reduce(self, state: State) -> ReducedState:
        """x̄⁰ = Vᵀ W x⁰ para los campos reducidos."""
        values = {}
        for name in FIELDS:
            x = state.field(name)
            if self.is_reduced(name):
                values[name] = self.bases[name].T @ self.inner_products[name].apply(x)
            else:
                values[name] = x.copy()
        return ReducedState(values, state.k)

    def full(self, name: str, value: np.ndarray) -> np.ndarray:
        return self.bases[name] @ value if self.is_reduced(name) else value

    def reconstruct(self, red: ReducedState) -> State:
        return State(*(self.full(f, red.field(f)) for f in FIELDS), k=red.k)


def build_reduced_model(
    disc: CellDiscretization,
    bases: dict[str, np.ndarray],
    collateral: Optional[dict[str, np.ndarray]] = None,
    inner_product: str = "mass",
    dofs: Optional[dict[str, np.ndarray]] = None,
) -> ReducedModel:
    """
    `bases` sólo trae los campos a reducir. Sin `collateral` (o sin entrada para un campo) ese campo
    minimiza el residuo completo. `dofs` permite reutilizar DOFs ya seleccionados.
    """
    if not bases:
        raise DeimError("Se necesita al menos un campo reducido")
    unknown = set(bases) - set(FIELDS)
    if unknown:
        raise DeimError(f"Campos desconocidos: {sorted(unknown)}")
    collateral = collateral or {}
    dofs = dofs or {}
    inner_products, interpolants, evaluators = {}, {}, {}
    for name, basis in bases.items():
        if basis.shape[0] != disc.field_size(name):
            raise DeimError(
                f"Base de '{name}' con {basis.shape[0]} filas, se esperaban {disc.field_size(name)}"
            )
        inner_products[name] = InnerProduct.for_field(disc, name, inner_product)
        c = collateral.get(name)
        interp = build_interpolant(c, dofs.get(name)) if c is not None and c.shape[1] else None
        interpolants[name] = interp
        evaluators[name] = build_restricted_evaluator(name, disc, bases, interp)
    rom = ReducedModel(disc, dict(bases), inner_products, interpolants, evaluators)
    logger.info(f"[ROM] Modelo reducido: N={rom.dimensions()}, DEIM={rom.deim_sizes()}")
    return rom


@dataclass
class ReducedTrajectory:
    states: list[ReducedState]
    iterations: dict[str, list[int]] = field(default_factory=lambda: {f: [] for f in FIELDS})
    error: Optional[str] = None

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def reconstruct(self, rom: ReducedModel) -> list[State]:
        return [rom.reconstruct(s) for s in self.states]


class ReducedSimulator:
    """Avanza el modelo reducido para un η fijo en el orden campo de fase → orientación → Stokes."""

    def __init__(
        self,
        rom: ReducedModel,
        params: ModelParameters,
        dt: float,
        solvers: Optional[SolverSettings] = None,
        atol: float = 1e-10,
        max_iter: int = 20,
    ):
        self.rom, self.params, self.dt = rom, params, dt
        self.solvers = solvers
        self.atol, self.max_iter = atol, max_iter
        self._model: Optional[CellModel] = None

    @property
    def model(self) -> CellModel:
        """Modelo completo para los campos sin reducir; se construye sólo si hace falta."""
        if self._model is None:
            self._model = CellModel(self.rom.disc, self.params, self.dt, self.solvers)
        return self._model

    def _minimize(self, name: str, system, x_init: np.ndarray, affine: bool = False) -> GaussNewtonResult:
        ev = self.rom.evaluators[name]
        basis = ev.local_bases[name]

        def residual(x: np.ndarray) -> np.ndarray:
            return ev.project(system.residual(basis @ x))

        def jacobian(x: np.ndarray) -> np.ndarray:
            return ev.project_jacobian(system.jacobian(basis @ x), basis)

        return gauss_newton(
            residual,
            jacobian,
            x_init,
            atol=self.atol,
            max_iter=self.max_iter,
            affine=affine,
        )

    def _pfield(self, red: ReducedState) -> tuple[np.ndarray, int]:
        rom = self.rom
        if not rom.is_reduced("pfield"):
            result = self.model.solve_pfield(rom.reconstruct(red))
            return result.x, result.iterations
        ev = rom.evaluators["pfield"]
        phi_old, _, _ = split_pfield(ev.local("pfield", red.field("pfield")))
        d_old, _ = split_ofield(ev.local("ofield", red.field("ofield")))
        u_old, _ = split_stokes(ev.local("stokes", red.field("stokes")), ev.disc.n_u)
        system = PhaseFieldSystem(ev.disc, self.params, self.dt, phi_old, d_old, u_old)
        result = self._minimize("pfield", system, red.field("pfield"))
        return result.x, result.iterations

    def _ofield(self, red: ReducedState, pfield_new: np.ndarray) -> tuple[np.ndarray, int]:
        rom = self.rom
        if not rom.is_reduced("ofield"):
            result = self.model.solve_ofield(rom.reconstruct(red), rom.full("pfield", pfield_new))
            return result.x, result.iterations
        ev = rom.evaluators["ofield"]
        d_old, _ = split_ofield(ev.local("ofield", red.field("ofield")))
        u_old, _ = split_stokes(ev.local("stokes", red.field("stokes")), ev.disc.n_u)
        phi_new, _, _ = split_pfield(ev.local("pfield", pfield_new))
        system = OrientationSystem(ev.disc, self.params, self.dt, d_old, u_old, phi_new)
        result = self._minimize("ofield", system, red.field("ofield"))
        return result.x, result.iterations

    def _stokes(self, red: ReducedState, pfield_new: np.ndarray, ofield_new: np.ndarray) -> tuple[np.ndarray, int]:
        rom = self.rom
        if not rom.is_reduced("stokes"):
            result = self.model.solve_stokes(
                rom.reconstruct(red), rom.full("pfield", pfield_new), rom.full("ofield", ofield_new)
            )
            return result.x, result.iterations
        ev = rom.evaluators["stokes"]
        phi, phinat, _ = split_pfield(ev.local("pfield", pfield_new))
        d, dnat = split_ofield(ev.local("ofield", ofield_new))
        system = StokesSystem(ev.disc, self.params, phi, phinat, d, dnat)
        result = self._minimize("stokes", system, red.field("stokes"), affine=True)
        return result.x, result.iterations

    def rom_step(self, red: ReducedState) -> tuple[ReducedState, dict[str, int]]:
        k = red.k + 1
        iterations: dict[str, int] = {}
        values: dict[str, np.ndarray] = {}
        stages = (
            ("pfield", lambda: self._pfield(red)),
            ("ofield", lambda: self._ofield(red, values["pfield"])),
            ("stokes", lambda: self._stokes(red, values["pfield"], values["ofield"])),
        )
        for name, solve in stages:
            try:
                values[name], iterations[name] = solve()
            except SolverError as e:
                raise StageError(name, k, e) from e
        logger.debug(f"[ROM] k={k} iteraciones {iterations}")
        return ReducedState(values, k), iterations

    def rollout(self, initial: State, n_steps: int) -> ReducedTrajectory:
        red = self.rom.reduce(initial)
        trajectory = ReducedTrajectory(states=[red])
        try:
            for _ in range(n_steps):
                red, iterations = self.rom_step(red)
                trajectory.states.append(red)
                for name in FIELDS:
                    trajectory.iterations[name].append(iterations[name])
        except StageError as e:
            logger.warning(f"[ROM] Trayectoria reducida truncada en k={e.step}: {e}")
            trajectory.error = str(e)
        logger.info(
            f"[ROM] {trajectory.n_steps}/{n_steps} pasos, Ca={self.params.ca:.4g}, Pa={self.params.pa:.4g}"
        )
        return trajectory


def rom_step(
    red: ReducedState, params: ModelParameters, dt: float, rom: ReducedModel, **kwargs
) -> ReducedState:
    return ReducedSimulator(rom, params, dt, **kwargs).rom_step(red)[0]


# --- Errores ---


def mean_l2_errors(
    fom: np.ndarray, rom: np.ndarray, inner: InnerProduct = IDENTITY
) -> tuple[float, float]:
    """
    Error medio absoluto √(mean ‖v − v_rom‖²_W) y relativo √(mean ‖v − v_rom‖²_W / ‖v‖²_W) sobre las
    columnas. Los snapshots de norma nula no entran en el relativo.
    """
    if fom.shape != rom.shape:
        raise SolverError(f"Trayectorias de formas distintas: {fom.shape} vs {rom.shape}")
    if fom.shape[1] == 0:
        return 0.0, 0.0
    diff = fom - rom
    err2 = np.maximum(np.einsum("ij,ij->j", diff, inner.apply(diff)), 0.0)
    norm2 = np.maximum(np.einsum("ij,ij->j", fom, inner.apply(fom)), 0.0)
    absolute = math.sqrt(float(np.mean(err2)))
    nonzero = norm2 > 0
    if not np.all(nonzero):
        logger.warning(f"[ROM] {int(np.count_nonzero(~nonzero))} snapshots de norma nula fuera del error relativo")
    relative = math.sqrt(float(np.mean(err2[nonzero] / norm2[nonzero]))) if np.any(nonzero) else 0.0
    return absolute, relative


def field_errors(
    fom_states: list[State], rom_states: list[State], inner_products: dict[str, InnerProduct]
) -> dict[str, tuple[float, float]]:
    """Errores por campo sobre el prefijo común de ambas trayectorias."""
    n = min(len(fom_states), len(rom_states))
    if n < max(len(fom_states), len(rom_states)):
        logger.warning(f"[ROM] Trayectorias de largo distinto; se comparan los primeros {n} estados")
    return {
        name: mean_l2_errors(
            np.column_stack([s.field(name) for s in fom_states[:n]]),
            np.column_stack([s.field(name) for s in rom_states[:n]]),
            inner_products.get(name, IDENTITY),
        )
        for name in FIELDS
    }


def reconstruction_errors(
    snapshots: np.ndarray, basis: np.ndarray, inner: InnerProduct = IDENTITY
) -> tuple[float, float]:
    """La misma métrica con la proyección W-ortogonal en lugar de la solución reducida."""
    return mean_l2_errors(snapshots, orth_project(basis, inner, snapshots), inner)
