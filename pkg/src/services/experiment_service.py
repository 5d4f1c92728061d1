"""
Los cuatro comandos de experimentos: simulación, benchmark de solvers, construcción de bases reducidas y
evaluación del modelo reducido sobre parámetros de validación.

Cada comando recibe un RunConfig ya validado, escribe sus archivos en `config.output_dir` y devuelve
un resumen (dict serializable) que también queda en `summary.json`.
"""
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..config import get_settings
from ..exceptions import CellModelError, ConfigError, DeimError, StageError
from ..schemas.benchmark_schema import BenchmarkRecord
from ..schemas.model_parameters_schema import ModelParameters
from ..schemas.run_config_schema import Command, MeshSpec, RunConfig, SolverSettings
from .assembly import FIELDS
from .cell_dynamics import CellModel, run_fom
from .output_service import RunOutput
from .pod_hapod import HapodTraining, InnerProduct, chunked_hapod_driver
from .rom_deim import ReducedSimulator, build_reduced_model, field_errors, reconstruction_errors
from .run_registry_service import RunRegistry
from .scenarios import Scenario, build_discretization, initial_state, scenario_from_spec
from .storage_service import load_training_basis, save_reduced_model, save_training

logger = logging.getLogger(__name__)

SOLVER_VARIANTS = {
    "pfield": ("gmres-ilu", "direct"),
    "ofield": ("schur-gmres", "gmres", "direct"),
    "stokes": ("schur-cg", "direct"),
}
STEADY_VELOCITY = 1e-3

DIAGNOSTIC_COLUMNS = (
    ["k", "t", "mass", "energy", "velocity_max"]
    + [f"newton_{f}" for f in FIELDS]
    + [f"linear_{f}" for f in FIELDS]
)
BENCHMARK_COLUMNS = list(BenchmarkRecord.model_fields)
MODE_COUNT_COLUMNS = [
    "pipeline", "tolerance", "final_modes", "max_local_modes", "max_input_vectors", "n_snapshots",
]
ERROR_COLUMNS = [
    "case", "reduced_fields", "pod_tol", "deim_tol", "parameter", "ca", "pa", "field", "reduced",
    "abs_error", "rel_error", "n_steps", "error",
]
SUMMARY_COLUMNS = [
    "case", "reduced_fields", "pod_tol", "deim_tol", "field", "reduced", "abs_error", "rel_error",
    "n_parameters", "n_failed",
]
RECONSTRUCTION_COLUMNS = ["pipeline", "tolerance", "parameter", "abs_error", "rel_error"]


def worker_count(config: RunConfig) -> int:
    return max(1, min(config.n_workers, get_settings().max_workers))


def _map(function: Callable, jobs: list, n_workers: int) -> list:
    """Mapeo ordenado; con más de un worker usa un pool de procesos acotado."""
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
            return list(pool.map(function, jobs))
    return [function(job) for job in jobs]


# --- simulate ---


def cmd_simulate(config: RunConfig) -> dict:
    config = config.for_command("simulate")
    scenario = scenario_from_spec(config.scenario)
    disc = build_discretization(config.mesh, scenario, config.order)
    params = config.parameters
    out = RunOutput(config.output_dir)
    stride = config.capture.output_stride
    n_steps = config.n_steps
    logger.info(
        f"[Simulate] {scenario.name} {config.mesh.nx}×{config.mesh.ny} {config.mesh.cell_kind}, "
        f"K={n_steps}, Ca={params.ca:g}, Pa={params.pa:g}"
    )

    model = CellModel(disc, params, config.dt, config.solvers)
    state = initial_state(disc, scenario, params.epsilon)
    rows = [model.diagnostics(state)]
    if config.capture.write_vtk:
        out.vtk(disc, state, config.dt)
    error = None
    try:
        for state, record in model.iterate(state, n_steps):
            if state.k % stride == 0 or state.k == n_steps:
                row = model.diagnostics(state)
                row.update({f"newton_{n}": record.iterations[n] for n in FIELDS})
                row.update({f"linear_{n}": record.linear_iterations[n] for n in FIELDS})
                rows.append(row)
                if config.capture.write_vtk:
                    out.vtk(disc, state, config.dt)
    except StageError as e:
        logger.warning(f"[Simulate] Simulación truncada: {e}")
        error = str(e)

    out.csv("diagnostics.csv", DIAGNOSTIC_COLUMNS, rows)
    masses = [r["mass"] for r in rows]
    final = rows[-1]
    summary = {
        "command": "simulate",
        "scenario": scenario.name,
        "mesh": config.mesh.model_dump(mode="json"),
        "parameters": params.model_dump(),
        "dt": config.dt,
        "t_end": config.t_end,
        "n_steps": n_steps,
        "completed_steps": int(final["k"]),
        "final": final,
        "mass_drift": abs(masses[-1] - masses[0]) / abs(masses[0]) if masses[0] else 0.0,
        "energy_initial": rows[0]["energy"],
        "energy_final": final["energy"],
        "near_steady": final["velocity_max"] < STEADY_VELOCITY,
        "error": error,
        "files": out.relative(),
    }
    out.json("summary.json", summary)
    return summary


# --- benchmark-solvers ---


@dataclass(frozen=True)
class BenchmarkCase:
    grid: int
    stage: str
    solver: str
    mesh: MeshSpec
    scenario: Scenario
    params: ModelParameters
    dt: float
    n_steps: int
    solvers: SolverSettings


def peak_memory_bytes() -> Optional[int]:
    """RSS máximo del proceso; None donde el sistema no lo expone."""
    try:
        import resource
    except ImportError:
        return None
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(rss if sys.platform == "darwin" else rss * 1024)


def run_benchmark_case(case: BenchmarkCase) -> BenchmarkRecord:
    disc = build_discretization(case.mesh, case.scenario)
    settings = case.solvers.model_copy(update={case.stage: case.solver})
    model = CellModel(disc, case.params, case.dt, settings)
    state = initial_state(disc, case.scenario, case.params.epsilon)
    newton: list[int] = []
    error = None
    try:
        for state, record in model.iterate(state, case.n_steps):
            newton.append(record.iterations[case.stage])
    except StageError as e:
        logger.warning(f"[Benchmark] {case.stage}/{case.solver} en {case.grid}: {e}")
        error = str(e)
    stats = model.solver_stats[case.stage]
    record = BenchmarkRecord(
        grid=case.grid,
        n_elements=disc.mesh.n_elements,
        stage=case.stage,
        solver=case.solver,
        n_solves=stats.n_solves,
        mean_iterations=stats.mean_iterations,
        mean_newton_iterations=float(np.mean(newton)) if newton else float("nan"),
        setup_seconds=stats.setup_seconds,
        mean_solve_seconds=stats.mean_solve_seconds,
        peak_memory_bytes=peak_memory_bytes(),
        error=error,
    )
    logger.info(
        f"[Benchmark] grid={case.grid} {case.stage}/{case.solver}: It.={record.mean_iterations:.3g} "
        f"setup={record.setup_seconds:.3g}s solve={record.mean_solve_seconds:.3g}s"
    )
    return record


def cmd_benchmark_solvers(config: RunConfig) -> dict:
    config = config.for_command("benchmark-solvers")
    scenario = scenario_from_spec(config.scenario)
    out = RunOutput(config.output_dir)
    cases = [
        BenchmarkCase(
            grid=g * g,
            stage=stage,
            solver=solver,
            mesh=config.mesh.model_copy(update={"nx": g, "ny": g}),
            scenario=scenario,
            params=config.parameters,
            dt=config.dt,
            n_steps=config.benchmark.n_steps,
            solvers=config.solvers,
        )
        for g in config.benchmark.grids
        for stage in config.benchmark.stages
        for solver in SOLVER_VARIANTS[stage]
    ]
    # las mediciones de tiempo y memoria se hacen de a un caso por vez
    records = [run_benchmark_case(case) for case in cases]
    out.csv("benchmark.csv", BENCHMARK_COLUMNS, (r.model_dump() for r in records))
    summary = {
        "command": "benchmark-solvers",
        "grids": [g * g for g in config.benchmark.grids],
        "n_steps": config.benchmark.n_steps,
        "records": [r.model_dump() for r in records],
        "files": out.relative(),
    }
    out.json("summary.json", summary)
    return summary


# --- parámetros de entrenamiento y validación ---


def training_parameters(config: RunConfig) -> list[ModelParameters]:
    """Grilla uniforme n×n en (Ca, Pa) sobre la caja; el resto de η sale de `config.parameters`."""
    s = config.sampling
    n = s.n_train_per_axis
    cas = np.linspace(*s.ca_range, n)
    pas = np.linspace(*s.pa_range, n)
    return [
        config.parameters.model_copy(update={"ca": float(ca), "pa": float(pa)})
        for ca in cas
        for pa in pas
    ]


def validation_parameters(
    config: RunConfig, training: list[ModelParameters], max_draws: int = 10_000
) -> list[ModelParameters]:
    """Puntos uniformes en la caja, sorteados con `config.seed`, distintos de todos los de entrenamiento."""
    s = config.sampling
    rng = np.random.default_rng(config.seed)
    taken = np.array([[p.ca, p.pa] for p in training]) if training else np.zeros((0, 2))
    chosen: list[ModelParameters] = []
    for _ in range(max_draws):
        if len(chosen) == s.n_validation:
            break
        ca = float(rng.uniform(*s.ca_range))
        pa = float(rng.uniform(*s.pa_range))
        if taken.size and np.any(np.all(np.isclose(taken, [ca, pa], rtol=1e-12, atol=0.0), axis=1)):
            continue
        chosen.append(config.parameters.model_copy(update={"ca": ca, "pa": pa}))
        taken = np.vstack([taken, [ca, pa]])
    if len(chosen) < s.n_validation:
        raise ConfigError("No se pudieron sortear parámetros de validación distintos de los de entrenamiento")
    return chosen


def _tolerances(config: RunConfig) -> dict[str, list[float]]:
    mor = config.mor
    tolerances = {f: list(mor.pod_tolerances) for f in mor.reduced_fields}
    if mor.use_deim:
        tolerances.update({f"{f}_residual": list(mor.deim_tolerances) for f in mor.reduced_fields})
    return tolerances


def _train(config: RunConfig, scenario: Scenario) -> HapodTraining:
    parameters = training_parameters(config)
    return chunked_hapod_driver(
        config.mesh,
        scenario,
        parameters,
        chunk_size=config.mor.chunk_size,
        tolerances=_tolerances(config),
        omega=config.mor.omega,
        n_workers=worker_count(config),
        dt=config.dt,
        t_end=config.t_end,
        inner_product=config.mor.inner_product,
        solvers=config.solvers,
    )


# --- build-rb ---


def cmd_build_rb(config: RunConfig) -> dict:
    config = config.for_command("build-rb")
    scenario = scenario_from_spec(config.scenario)
    mor = config.mor
    out = RunOutput(config.output_dir)
    training = _train(config, scenario)
    save_training(out.path("bases"), training, mor.inner_product)
    counts = [vars(c) for c in training.mode_counts]
    out.csv("mode_counts.csv", MODE_COUNT_COLUMNS, counts)

    # modelo reducido con las tolerancias más finas pedidas
    disc = build_discretization(config.mesh, scenario, config.order)
    pod_tol = min(mor.pod_tolerances)
    bases = {f: training.basis(f, pod_tol).modes for f in mor.reduced_fields}
    collateral = None
    if mor.use_deim and mor.deim_tolerances:
        deim_tol = min(mor.deim_tolerances)
        collateral = {f: training.basis(f"{f}_residual", deim_tol).modes for f in mor.reduced_fields}
    rom = build_reduced_model(disc, bases, collateral, mor.inner_product)
    out.written.append(
        save_reduced_model(out.path("reduced_model.npz"), rom, config.mesh, collateral, mor.inner_product)
    )
    out.written.extend(sorted(out.path("bases").glob("*.basis")))

    summary = {
        "command": "build-rb",
        "n_training": len(training_parameters(config)),
        "n_workers": training.n_workers,
        "depth": training.depth,
        "n_snapshots": training.n_snapshots,
        "mode_counts": counts,
        "reduced_model": {"dimensions": rom.dimensions(), "deim": rom.deim_sizes()},
        "files": out.relative(),
    }
    out.json("summary.json", summary)
    logger.info(f"[HAPOD] Entrenamiento completo en {training.elapsed:.1f}s")
    return summary


# --- evaluate-rom ---


@dataclass(frozen=True)
class RomCase:
    name: str
    fields: tuple[str, ...]
    pod_tol: float
    deim_tol: Optional[float] = None


@dataclass(frozen=True)
class EvaluationJob:
    index: int
    params: ModelParameters
    mesh: MeshSpec
    scenario: Scenario
    order: int
    dt: float
    t_end: float
    solvers: SolverSettings
    cases: tuple[RomCase, ...]
    bases: dict
    inner_product: str
    gauss_newton_atol: float
    gauss_newton_max_iter: int


@dataclass
class EvaluationOutput:
    errors: list[dict] = field(default_factory=list)
    reconstruction: list[dict] = field(default_factory=list)
    fom_error: Optional[str] = None


def rom_cases(config: RunConfig) -> list[RomCase]:
    mor = config.mor
    deim_options: list[Optional[float]] = []
    if mor.use_deim:
        deim_options += list(mor.deim_tolerances)
    if not mor.use_deim or mor.compare_without_deim:
        deim_options.append(None)
    groups = [(f,) for f in mor.reduced_fields] if mor.single_field else [tuple(mor.reduced_fields)]
    cases = []
    for fields in groups:
        for pod_tol in mor.pod_tolerances:
            for deim_tol in deim_options:
                suffix = f"-deim{deim_tol:.0e}" if deim_tol is not None else "-nodeim"
                label = "+".join(fields) + f"-pod{pod_tol:.0e}" + suffix
                cases.append(RomCase(label, fields, pod_tol, deim_tol))
    return cases


def evaluate_parameter(job: EvaluationJob) -> EvaluationOutput:
    """FOM de referencia para un parámetro de validación y todos los casos reducidos contra ella."""
    params = job.params
    disc = build_discretization(job.mesh, job.scenario, job.order)
    initial = initial_state(disc, job.scenario, params.epsilon)
    fom = run_fom(disc, params, initial, job.t_end, job.dt, solvers=job.solvers)
    inner = {f: InnerProduct.for_field(disc, f, job.inner_product) for f in FIELDS}
    output = EvaluationOutput(fom_error=fom.error)
    base_row = {"parameter": job.index, "ca": params.ca, "pa": params.pa}

    reconstructed = set()
    for case in job.cases:
        for name in case.fields:
            if (name, case.pod_tol) in reconstructed:
                continue
            reconstructed.add((name, case.pod_tol))
            abs_err, rel_err = reconstruction_errors(fom.snapshots(name), job.bases[(name, case.pod_tol)], inner[name])
            output.reconstruction.append(
                {"pipeline": name, "tolerance": case.pod_tol, "parameter": job.index,
                 "abs_error": abs_err, "rel_error": rel_err}
            )

    for case in job.cases:
        case_row = {
            **base_row,
            "case": case.name,
            "reduced_fields": "+".join(case.fields),
            "pod_tol": case.pod_tol,
            "deim_tol": "" if case.deim_tol is None else case.deim_tol,
        }
        bases = {f: job.bases[(f, case.pod_tol)] for f in case.fields}
        collateral = None
        if case.deim_tol is not None:
            collateral = {f: job.bases[(f"{f}_residual", case.deim_tol)] for f in case.fields}
        try:
            rom = build_reduced_model(disc, bases, collateral, job.inner_product)
        except DeimError as e:
            logger.warning(f"[ROM] {case.name}: {e}")
            for name in FIELDS:
                output.errors.append({**case_row, "field": name, "reduced": name in case.fields,
                                      "abs_error": float("nan"), "rel_error": float("nan"),
                                      "n_steps": 0, "error": str(e)})
            continue
        simulator = ReducedSimulator(
            rom, params, job.dt, job.solvers, atol=job.gauss_newton_atol, max_iter=job.gauss_newton_max_iter
        )
        trajectory = simulator.rollout(initial, fom.n_steps)
        errors = field_errors(fom.states, trajectory.reconstruct(rom), inner)
        for name in FIELDS:
            output.errors.append(
                {**case_row, "field": name, "reduced": name in case.fields,
                 "abs_error": errors[name][0], "rel_error": errors[name][1],
                 "n_steps": trajectory.n_steps, "error": trajectory.error or ""}
            )
    return output


def _aggregate(rows: list[dict], keys: list[str]) -> list[dict]:
    """Media cuadrática sobre parámetros: cada fila ya es una media temporal con igual número de pasos."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    summary = []
    for key, group in groups.items():
        valid = [r for r in group if not r.get("error") and math.isfinite(r["abs_error"])]
        entry = dict(zip(keys, key))
        entry.update(
            abs_error=math.sqrt(np.mean([r["abs_error"] ** 2 for r in valid])) if valid else float("nan"),
            rel_error=math.sqrt(np.mean([r["rel_error"] ** 2 for r in valid])) if valid else float("nan"),
            n_parameters=len(group),
            n_failed=len(group) - len(valid),
        )
        summary.append(entry)
    return summary


def _stored_bases(config: RunConfig) -> dict:
    directory = Path(config.mor.basis_dir)
    return {
        (pipeline, tol): load_training_basis(directory, pipeline, tol).modes
        for pipeline, tols in _tolerances(config).items()
        for tol in tols
    }


def cmd_evaluate_rom(config: RunConfig) -> dict:
    """
    Errores del modelo reducido sobre los parámetros de validación.

    Con el mismo (config, seed) los CSV y el JSON se repiten byte a byte. `n_workers` forma parte de la
    configuración: el reparto de chunks entre procesos define el árbol HAPOD, así que cambiarlo
    cambia las bases entrenadas y, con ellas, errors.csv, errors_summary.csv y reconstruction.csv.
    """
    config = config.for_command("evaluate-rom")
    scenario = scenario_from_spec(config.scenario)
    mor = config.mor
    out = RunOutput(config.output_dir)
    training_params = training_parameters(config)
    validation = validation_parameters(config, training_params)

    if mor.basis_dir:
        bases = _stored_bases(config)
        logger.info(f"[ROM] {len(bases)} bases leídas de {mor.basis_dir}")
    else:
        training = _train(config, scenario)
        save_training(out.path("bases"), training, mor.inner_product)
        bases = {key: result.modes for key, result in training.bases.items()}

    cases = rom_cases(config)
    jobs = [
        EvaluationJob(
            index=i, params=p, mesh=config.mesh, scenario=scenario, order=config.order, dt=config.dt,
            t_end=config.t_end, solvers=config.solvers, cases=tuple(cases), bases=bases,
            inner_product=mor.inner_product, gauss_newton_atol=mor.gauss_newton_atol,
            gauss_newton_max_iter=mor.gauss_newton_max_iter,
        )
        for i, p in enumerate(validation)
    ]
    logger.info(f"[ROM] {len(cases)} casos sobre {len(jobs)} parámetros de validación")
    started = time.perf_counter()
    outputs = _map(evaluate_parameter, jobs, worker_count(config))
    logger.info(f"[ROM] Evaluación completa en {time.perf_counter() - started:.1f}s")

    error_rows = [row for o in outputs for row in o.errors]
    reconstruction_rows = [row for o in outputs for row in o.reconstruction]
    summary_rows = _aggregate(error_rows, ["case", "reduced_fields", "pod_tol", "deim_tol", "field", "reduced"])
    reconstruction_summary = _aggregate(reconstruction_rows, ["pipeline", "tolerance"])

    out.csv("errors.csv", ERROR_COLUMNS, error_rows)
    out.csv("errors_summary.csv", SUMMARY_COLUMNS, summary_rows)
    out.csv("reconstruction.csv", RECONSTRUCTION_COLUMNS, reconstruction_rows)
    out.csv(
        "reconstruction_summary.csv",
        ["pipeline", "tolerance", "abs_error", "rel_error", "n_parameters"],
        reconstruction_summary,
    )
    fom_failures = [i for i, o in enumerate(outputs) if o.fom_error]
    summary = {
        "command": "evaluate-rom",
        "n_training": len(training_params),
        "validation": [{"ca": p.ca, "pa": p.pa} for p in validation],
        "cases": [c.name for c in cases],
        "errors": summary_rows,
        "reconstruction": reconstruction_summary,
        "fom_failures": fom_failures,
        "files": out.relative(),
    }
    out.json("summary.json", summary)
    return summary


COMMANDS: dict[str, Callable[[RunConfig], dict]] = {
    "simulate": cmd_simulate,
    "benchmark-solvers": cmd_benchmark_solvers,
    "build-rb": cmd_build_rb,
    "evaluate-rom": cmd_evaluate_rom,
}


def run_command(command: Command, config: RunConfig) -> dict:
    try:
        handler = COMMANDS[command]
    except KeyError:
        raise ConfigError(f"Comando desconocido: {command}") from None
    return handler(config)


def failed(summary: dict) -> bool:
    """Un resumen con trayectoria truncada cuenta como fallo numérico."""
    return bool(summary.get("error"))



def execute(
    command: Command,
    config: RunConfig,
    registry: Optional[RunRegistry] = None,
    run_id: Optional[int] = None,
) -> dict:
    """
    Ejecuta un comando dejando constancia en el registro de corridas.

    Si `run_id` es None la corrida se registra aquí (CLI); la API la registra antes para devolver el id.
    Los errores de dominio se registran y se propagan.
    """
    registry = registry or RunRegistry()
    if run_id is None:
        run_id = registry.start(command, config)
    registry.mark_running(run_id)
    started = time.perf_counter()
    try:
        summary = run_command(command, config)
    except CellModelError as e:
        logger.error(f"❌ {command} falló: {type(e).__name__}: {e}")
        registry.fail(run_id, f"{type(e).__name__}: {e}")
        raise
    elapsed = time.perf_counter() - started
    if failed(summary):
        logger.warning(f"⚠️ {command} terminó con error tras {elapsed:.1f}s: {summary['error']}")
        registry.fail(run_id, str(summary["error"]), summary)
    else:
        logger.info(f"✅ {command} terminado en {elapsed:.1f}s → {config.output_dir}")
        registry.finish(run_id, summary)
    return summary
