"""
Modelo de orden completo: residuos condensados de las tres etapas, Newton con backtracking, el paso
semi-implícito (campo de fase → orientación → Stokes), captura de snapshots y diagnósticos.

Los sistemas de etapa (`PhaseFieldSystem`, `OrientationSystem`, `StokesSystem`) trabajan sobre una
`CellDiscretization` completa o restringida y con vectores en su numeración local; el ROM con DEIM
reutiliza las mismas clases.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np
from scipy import sparse

from ..exceptions import ConvergenceError, SolverError, StageError
from ..schemas.model_parameters_schema import ModelParameters
from ..schemas.run_config_schema import SolverSettings
from .assembly import (
    FIELDS,
    CellDiscretization,
    assemble_convection_pfield,
    assemble_pfield_jacobian_blocks,
    assemble_stokes,
    director_norm_vector,
    double_well_vectors,
    orientation_convection,
    orientation_coupling_mass,
    orientation_nonlinear,
)
from .linalg_solvers import (
    OrientationJacobianSolver,
    PhaseFieldJacobianSolver,
    SolverStats,
    StokesSolver,
    cholesky_factorize,
)

logger = logging.getLogger(__name__)


# --- Estado ---


def split_pfield(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(φ, φ♮, μ)"""
    return tuple(np.split(x, 3))


def split_ofield(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d, d♮), cada uno con las dos componentes apiladas."""
    return tuple(np.split(x, 2))


def split_stokes(x: np.ndarray, n_u: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, p) con u de longitud 2·n_u."""
    return x[: 2 * n_u], x[2 * n_u :]


@dataclass
class State:
    pfield: np.ndarray
    ofield: np.ndarray
    stokes: np.ndarray
    k: int = 0

    def field(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def replace(self, **fields) -> "State":
        data = {"pfield": self.pfield, "ofield": self.ofield, "stokes": self.stokes, "k": self.k}
        data.update(fields)
        return State(**data)

    def check(self, disc: CellDiscretization) -> None:
        for name in FIELDS:
            if self.field(name).shape != (disc.field_size(name),):
                raise SolverError(
                    f"Estado inválido: '{name}' tiene longitud {self.field(name).shape}, "
                    f"se esperaba {disc.field_size(name)}"
                )


@dataclass
class StepRecord:
    """Lo que deja un paso de tiempo: iteraciones de Newton, iterados de residuo e iteraciones lineales."""

    k: int
    iterations: dict[str, int]
    residuals: dict[str, list[np.ndarray]]
    linear_iterations: dict[str, int]


@dataclass
class Trajectory:
    states: list[State]
    iterations: dict[str, list[int]] = field(default_factory=lambda: {f: [] for f in FIELDS})
    residuals: dict[str, list[list[np.ndarray]]] = field(default_factory=lambda: {f: [] for f in FIELDS})
    linear_iterations: dict[str, list[int]] = field(default_factory=lambda: {f: [] for f in FIELDS})
    diagnostics: list[dict] = field(default_factory=list)
    solver_stats: dict[str, SolverStats] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    def append(self, state: State, record: StepRecord) -> None:
        self.states.append(state)
        for name in FIELDS:
            self.iterations[name].append(record.iterations[name])
            self.residuals[name].append(record.residuals[name])
            self.linear_iterations[name].append(record.linear_iterations[name])

    def snapshots(self, name: str) -> np.ndarray:
        return np.column_stack([s.field(name) for s in self.states])

    def residual_snapshots(self, name: str) -> np.ndarray:
        columns = [r for step in self.residuals[name] for r in step]
        if not columns:
            return np.zeros((self.states[0].field(name).size, 0))
        return np.column_stack(columns)


# --- Sistemas de etapa ---


class PhaseFieldSystem:
    """
    r(φ, φ♮, μ) para entradas explícitas congeladas (φ^k, d^k, u^k):

        (M − Δt B(u^k)) φ + Δt γ E φ♮ − M φ^k
        f(φ, μ)/(Be ε²) + M φ♮ + (M/Ca + E/Be) μ + c₁/(2Pa) a(d^k)
        g(φ)/ε + ε E φ + M μ
    """

    def __init__(
        self,
        disc: CellDiscretization,
        params: ModelParameters,
        dt: float,
        phi_old: np.ndarray,
        d_old: np.ndarray,
        u_old: np.ndarray,
    ):
        self.disc, self.params, self.dt = disc, params, dt
        mass, stiffness = disc.mass, disc.stiffness
        self.transport = (mass - dt * assemble_convection_pfield(disc, u_old)).tocsr()
        self.old_mass = mass @ phi_old
        self.director_term = params.c1 / (2.0 * params.pa) * director_norm_vector(disc, d_old)
        self.mu_block = (mass / params.ca + stiffness / params.be).tocsr()

    def residual(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        mass, stiffness = self.disc.mass, self.disc.stiffness
        phi, phinat, mu = split_pfield(x)
        f, g = double_well_vectors(self.disc, phi, mu)
        return np.concatenate([
            self.transport @ phi + self.dt * p.gamma * (stiffness @ phinat) - self.old_mass,
            f / (p.be * p.epsilon**2) + mass @ phinat + self.mu_block @ mu + self.director_term,
            g / p.epsilon + p.epsilon * (stiffness @ phi) + mass @ mu,
        ])

    def jacobian(self, x: np.ndarray) -> sparse.csr_matrix:
        p = self.params
        mass, stiffness = self.disc.mass, self.disc.stiffness
        phi, _, mu = split_pfield(x)
        d_phi_f, d_mu_f = assemble_pfield_jacobian_blocks(self.disc, phi, mu)
        scale = 1.0 / (p.be * p.epsilon**2)
        return sparse.bmat(
            [
                [self.transport, self.dt * p.gamma * stiffness, None],
                [scale * d_phi_f, mass, self.mu_block + scale * d_mu_f],
                [p.epsilon * stiffness + d_mu_f / p.epsilon, None, mass],
            ],
            format="csr",
        )


def pfield_preconditioner(disc: CellDiscretization, params: ModelParameters, dt: float) -> sparse.csr_matrix:
    """Ĵ_pf: la jacobiana con B(u) despreciado, D_φf ≈ 0 y D_μf = D_φg ≈ 2M. No depende del tiempo."""
    mass, stiffness = disc.mass, disc.stiffness
    eps = params.epsilon
    return sparse.bmat(
        [
            [mass, dt * params.gamma * stiffness, None],
            [None, mass, (1.0 / params.ca + 2.0 / (params.be * eps**2)) * mass + stiffness / params.be],
            [eps * stiffness + (2.0 / eps) * mass, None, mass],
        ],
        format="csr",
    )


class OrientationSystem:
    """
    r(d, d♮) con u^k y φ^{k+1} congelados:

        (M + Δt B_of(u^k)) d + (Δt/κ) M d♮ − M d^k
        M d♮ + (c₁/Pa) C(φ^{k+1}) d − (c₁/Pa) f(d) − (1/Pa) E d
    """

    def __init__(
        self,
        disc: CellDiscretization,
        params: ModelParameters,
        dt: float,
        d_old: np.ndarray,
        u_old: np.ndarray,
        phi_new: np.ndarray,
    ):
        self.disc, self.params, self.dt = disc, params, dt
        self.mass = sparse.block_diag([disc.mass, disc.mass], format="csr")
        self.stiffness = sparse.block_diag([disc.stiffness, disc.stiffness], format="csr")
        self.top_left = (self.mass + dt * orientation_convection(disc, u_old, params.xi)).tocsr()
        self.coupling_mass = orientation_coupling_mass(disc, phi_new)
        self.old_mass = self.mass @ d_old
        self.linear_coupling = (
            (params.c1 / params.pa) * self.coupling_mass - self.stiffness / params.pa
        ).tocsr()

    def residual(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        d, dnat = split_ofield(x)
        f_of, _ = orientation_nonlinear(self.disc, d)
        return np.concatenate([
            self.top_left @ d + (self.dt / p.kappa) * (self.mass @ dnat) - self.old_mass,
            self.mass @ dnat + self.linear_coupling @ d - (p.c1 / p.pa) * f_of,
        ])

    def coupling(self, x: np.ndarray) -> sparse.csr_matrix:
        """G = (c₁/Pa) C(φ) − (1/Pa) E − (c₁/Pa) D_d f."""
        d, _ = split_ofield(x)
        _, jac = orientation_nonlinear(self.disc, d)
        return (self.linear_coupling - (self.params.c1 / self.params.pa) * jac).tocsr()

    def jacobian(self, x: np.ndarray) -> sparse.csr_matrix:
        return sparse.bmat(
            [[self.top_left, (self.dt / self.params.kappa) * self.mass], [self.coupling(x), self.mass]],
            format="csr",
        )


class StokesSystem:
    """r(u, p) = [A u + Bᵀ p − a(φ, φ♮, d, d♮); B u]. Afín en (u, p)."""

    def __init__(
        self,
        disc: CellDiscretization,
        params: ModelParameters,
        phi: np.ndarray,
        phinat: np.ndarray,
        d: np.ndarray,
        dnat: np.ndarray,
    ):
        self.disc = disc
        self.laplacian, self.divergence, self.rhs = assemble_stokes(
            disc, phi, phinat, d, dnat, params.fa, params.xi
        )

    def residual(self, x: np.ndarray) -> np.ndarray:
        u, p = split_stokes(x, self.disc.n_u)
        return np.concatenate([self.laplacian @ u + self.divergence.T @ p - self.rhs, self.divergence @ u])

    def jacobian(self, x: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        return sparse.bmat(
            [[self.laplacian, self.divergence.T], [self.divergence, None]], format="csr"
        )


def residual_pfield(
    disc: CellDiscretization,
    x_new: np.ndarray,
    x_old: np.ndarray,
    o_old: np.ndarray,
    s_old: np.ndarray,
    params: ModelParameters,
    dt: float,
) -> np.ndarray:
    phi_old, _, _ = split_pfield(x_old)
    d_old, _ = split_ofield(o_old)
    u_old, _ = split_stokes(s_old, disc.n_u)
    return PhaseFieldSystem(disc, params, dt, phi_old, d_old, u_old).residual(x_new)


def residual_ofield(
    disc: CellDiscretization,
    x_new: np.ndarray,
    x_old: np.ndarray,
    pfield_new: np.ndarray,
    s_old: np.ndarray,
    params: ModelParameters,
    dt: float,
) -> np.ndarray:
    d_old, _ = split_ofield(x_old)
    phi_new, _, _ = split_pfield(pfield_new)
    u_old, _ = split_stokes(s_old, disc.n_u)
    return OrientationSystem(disc, params, dt, d_old, u_old, phi_new).residual(x_new)


def residual_stokes(
    disc: CellDiscretization,
    x_new: np.ndarray,
    pfield_new: np.ndarray,
    ofield_new: np.ndarray,
    params: ModelParameters,
) -> np.ndarray:
    phi, phinat, _ = split_pfield(pfield_new)
    d, dnat = split_ofield(ofield_new)
    return StokesSystem(disc, params, phi, phinat, d, dnat).residual(x_new)


# --- Newton ---


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual_norms: list[float]
    residuals: list[np.ndarray]


def newton_backtracking(
    residual: Callable[[np.ndarray], np.ndarray],
    solve: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x_init: np.ndarray,
    atol: float = 1e-10,
    rtol: float = 1e-12,
    max_iter: int = 20,
    max_halvings: int = 10,
    capture: bool = False,
) -> NewtonResult:
    """
    Newton amortiguado: `solve(x, rhs)` devuelve δ con J(x) δ = rhs. Se acepta x + λδ con el primer
    λ = 1, ½, ¼, ... que cumple ‖r(x+λδ)‖ ≤ (1 − 10⁻⁴λ)‖r(x)‖.

    Con `capture` se guarda el residuo de cada iterado antes de actualizarlo.
    """
    x = np.array(x_init, dtype=float)
    r = residual(x)
    norm = float(np.linalg.norm(r))
    target = max(atol, rtol * norm)
    norms, captured = [norm], []
    iterations = 0
    while norm > target:
        if iterations >= max_iter:
            raise ConvergenceError(
                f"Newton no convergió en {max_iter} iteraciones (‖r‖={norm:.3e})",
                best=x, residual_norm=norm, iterations=iterations,
            )
        if capture:
            captured.append(r.copy())
        delta = solve(x, -r)
        step = 1.0
        for _ in range(max_halvings + 1):
            x_try = x + step * delta
            r_try = residual(x_try)
            norm_try = float(np.linalg.norm(r_try))
            if norm_try <= (1.0 - 1e-4 * step) * norm:
                break
            step *= 0.5
        else:
            raise ConvergenceError(
                f"Backtracking agotado tras {max_halvings} reducciones (‖r‖={norm:.3e})",
                best=x, residual_norm=norm, iterations=iterations,
            )
        x, r, norm = x_try, r_try, norm_try
        norms.append(norm)
        iterations += 1
        logger.debug(f"[Newton] it={iterations} ‖r‖={norm:.3e} λ={step:g}")
    return NewtonResult(x, iterations, norms, captured)


# --- Modelo ---


class CellModel:
    """
    Integrador del modelo completo para un η fijo. Las matrices independientes del tiempo (masas,
    rigideces, Ĵ_pf, el sistema de Stokes) se ensamblan y factorizan una única vez por instancia.
    """

    def __init__(
        self,
        disc: CellDiscretization,
        params: ModelParameters,
        dt: float,
        solvers: Optional[SolverSettings] = None,
    ):
        if disc.is_restricted:
            raise SolverError("El modelo completo necesita una discretización sin restringir")
        self.disc, self.params, self.dt = disc, params, dt
        self.settings = solvers or SolverSettings()
        s = self.settings

        self.pfield_solver = PhaseFieldJacobianSolver(
            s.pfield,
            pfield_preconditioner(disc, params, dt) if s.pfield == "gmres-ilu" else None,
            rtol=s.gmres_rtol, restart=s.gmres_restart, max_restarts=s.gmres_max_restarts,
            fill_factor=s.ilu_fill_factor, drop_tol=s.ilu_drop_tol,
        )
        self.ofield_solver = OrientationJacobianSolver(
            s.ofield, sparse.block_diag([disc.mass, disc.mass], format="csr"), dt, params.kappa,
            rtol=s.gmres_rtol, restart=s.gmres_restart, max_restarts=s.gmres_max_restarts,
        )
        self.stokes_solver = StokesSolver(
            s.stokes, disc.velocity_laplacian, disc.divergence, disc.mass, rtol=s.cg_rtol
        )
        self._mass_factor = None

    @property
    def solver_stats(self) -> dict[str, SolverStats]:
        return {
            "pfield": self.pfield_solver.stats,
            "ofield": self.ofield_solver.stats,
            "stokes": self.stokes_solver.stats,
        }

    def _newton(self, residual, solve, x_init, capture) -> NewtonResult:
        s = self.settings
        return newton_backtracking(
            residual, solve, x_init, atol=s.newton_atol, rtol=s.newton_rtol,
            max_iter=s.newton_max_iter, capture=capture,
        )

    def solve_pfield(self, state: State, capture: bool = False) -> NewtonResult:
        phi_old, _, _ = split_pfield(state.pfield)
        d_old, _ = split_ofield(state.ofield)
        u_old, _ = split_stokes(state.stokes, self.disc.n_u)
        system = PhaseFieldSystem(self.disc, self.params, self.dt, phi_old, d_old, u_old)
        return self._newton(
            system.residual,
            lambda x, rhs: self.pfield_solver.solve(system.jacobian(x), rhs),
            state.pfield,
            capture,
        )

    def solve_ofield(self, state: State, pfield_new: np.ndarray, capture: bool = False) -> NewtonResult:
        d_old, _ = split_ofield(state.ofield)
        u_old, _ = split_stokes(state.stokes, self.disc.n_u)
        phi_new, _, _ = split_pfield(pfield_new)
        system = OrientationSystem(self.disc, self.params, self.dt, d_old, u_old, phi_new)
        return self._newton(
            system.residual,
            lambda x, rhs: self.ofield_solver.solve(system.top_left, system.coupling(x), rhs),
            state.ofield,
            capture,
        )

    def solve_stokes(
        self, state: State, pfield_new: np.ndarray, ofield_new: np.ndarray, capture: bool = False
    ) -> NewtonResult:
        """Stokes es afín: una única resolución lineal; el residuo capturado es r_s(x_s^k)."""
        phi, phinat, _ = split_pfield(pfield_new)
        d, dnat = split_ofield(ofield_new)
        system = StokesSystem(self.disc, self.params, phi, phinat, d, dnat)
        r_old = system.residual(state.stokes)
        solution = self.stokes_solver.solve(system.rhs)
        x = np.concatenate([solution.u, solution.p])
        return NewtonResult(
            x, 1, [float(np.linalg.norm(r_old)), float(np.linalg.norm(system.residual(x)))],
            [r_old] if capture else [],
        )

    def _linear_count(self, name: str, before: int) -> int:
        return int(sum(self.solver_stats[name].iterations[before:]))

    def step(self, state: State, capture: bool = False) -> tuple[State, StepRecord]:
        """Un paso de la separación: campo de fase, orientación (con φ^{k+1}) y Stokes (con ambos)."""
        k = state.k + 1
        results: dict[str, NewtonResult] = {}
        linear: dict[str, int] = {}
        stages = (
            ("pfield", lambda: self.solve_pfield(state, capture)),
            ("ofield", lambda: self.solve_ofield(state, results["pfield"].x, capture)),
            ("stokes", lambda: self.solve_stokes(state, results["pfield"].x, results["ofield"].x, capture)),
        )
        for name, solve in stages:
            before = len(self.solver_stats[name].iterations)
            try:
                results[name] = solve()
            except SolverError as e:
                raise StageError(name, k, e) from e
            linear[name] = self._linear_count(name, before)

        new_state = State(results["pfield"].x, results["ofield"].x, results["stokes"].x, k)
        record = StepRecord(
            k=k,
            iterations={n: r.iterations for n, r in results.items()},
            residuals={n: r.residuals for n, r in results.items()},
            linear_iterations=linear,
        )
        logger.debug(
            f"[Step] k={k} newton pfield={record.iterations['pfield']} "
            f"ofield={record.iterations['ofield']}"
        )
        return new_state, record

    def iterate(self, state: State, n_steps: int, capture: bool = False) -> Iterator[tuple[State, StepRecord]]:
        for _ in range(n_steps):
            state, record = self.step(state, capture)
            yield state, record

    # --- diagnósticos ---

    def mass_factor(self):
        if self._mass_factor is None:
            self._mass_factor = cholesky_factorize(self.disc.mass)
        return self._mass_factor

    def diagnostics(self, state: State, dt: Optional[float] = None) -> dict:
        phi, _, _ = split_pfield(state.pfield)
        u, _ = split_stokes(state.stokes, self.disc.n_u)
        return {
            "k": state.k,
            "t": state.k * (self.dt if dt is None else dt),
            "mass": cell_volume(self.disc, phi),
            "energy": compute_free_energy(self.disc, state, self.params, self.mass_factor()),
            "velocity_max": velocity_sup_norm(self.disc, u),
        }


# --- Energía y diagnósticos ---


def cell_volume(disc: CellDiscretization, phi: np.ndarray) -> float:
    """∫φ evaluado como (M·1)ᵀφ."""
    return float(disc.lumped_mass @ phi)


def velocity_sup_norm(disc: CellDiscretization, u: np.ndarray) -> float:
    if u.size == 0:
        return 0.0
    ux, uy = u[: disc.n_u], u[disc.n_u :]
    return float(np.max(np.hypot(ux, uy)))


def chemical_potential(disc: CellDiscretization, phi: np.ndarray, epsilon: float, mass_factor=None) -> np.ndarray:
    """μ de M μ = −ε E φ − g(φ)/ε."""
    _, g = double_well_vectors(disc, phi, np.zeros_like(phi))
    factor = mass_factor or cholesky_factorize(disc.mass)
    return factor.solve(-epsilon * (disc.stiffness @ phi) - g / epsilon)


def compute_free_energy(
    disc: CellDiscretization, state: State, params: ModelParameters, mass_factor=None
) -> float:
    """
    E = E_S + E_d (la energía cinética es nula con Re = 0):

    E_S = (1/Ca)(ε/2 ‖∇φ‖² + (1/ε)∫W(φ)) + (1/(2 Be ε)) ‖μ‖²
    E_d = (1/Pa)(½‖∇d‖² + (c₁/4)∫|d|²(|d|² − 2φ))
    """
    eps = params.epsilon
    basis = disc.scalar_basis
    phi, _, _ = split_pfield(state.pfield)
    d, _ = split_ofield(state.ofield)
    mu = chemical_potential(disc, phi, eps, mass_factor)

    phi_q, _ = basis.interpolate(phi)
    d_q, _ = disc.director(d)
    norm2 = np.sum(d_q**2, axis=-1)
    well = 0.25 * (phi_q**2 - 1.0) ** 2

    surface = (0.5 * eps * phi @ (disc.stiffness @ phi) + np.sum(well * basis.dx) / eps) / params.ca
    bending = (mu @ (disc.mass @ mu)) / (2.0 * eps * params.be)
    n_p = disc.n_p
    gradient = sum(d[c * n_p : (c + 1) * n_p] @ (disc.stiffness @ d[c * n_p : (c + 1) * n_p]) for c in range(2))
    filament = (0.5 * gradient + 0.25 * params.c1 * np.sum(norm2 * (norm2 - 2.0 * phi_q) * basis.dx)) / params.pa
    return float(surface + bending + filament)


def run_fom(
    disc: CellDiscretization,
    params: ModelParameters,
    initial: State,
    t_end: float,
    dt: float,
    capture: bool = False,
    solvers: Optional[SolverSettings] = None,
    diagnostics_stride: int = 1,
    model: Optional[CellModel] = None,
) -> Trajectory:
    """
    Integra K = ceil(T/Δt) pasos desde `initial`. Un fallo de etapa no se propaga: se devuelve la
    trayectoria truncada con `error` describiendo la etapa y el paso.
    """
    initial.check(disc)
    model = model or CellModel(disc, params, dt, solvers)
    n_steps = int(math.ceil(t_end / dt - 1e-9)) if t_end > 0 else 0
    trajectory = Trajectory(states=[initial])
    trajectory.diagnostics.append(model.diagnostics(initial))
    try:
        for state, record in model.iterate(initial, n_steps, capture):
            trajectory.append(state, record)
            if state.k % diagnostics_stride == 0 or state.k == n_steps:
                row = model.diagnostics(state)
                row.update({f"newton_{n}": record.iterations[n] for n in FIELDS})
                row.update({f"linear_{n}": record.linear_iterations[n] for n in FIELDS})
                trajectory.diagnostics.append(row)
    except StageError as e:
        logger.warning(f"[FOM] Trayectoria truncada en k={e.step}: {e}")
        trajectory.error = str(e)
    trajectory.solver_stats = model.solver_stats
    logger.info(
        f"[FOM] {trajectory.n_steps}/{n_steps} pasos, Ca={params.ca:.4g}, Pa={params.pa:.4g}"
    )
    return trajectory
