"""
POD ponderada por el método de snapshots, HAPOD sobre árboles con raíz y el driver incremental por
chunks de tiempo y workers de parámetros.

Seis pipelines independientes: los tres estados (pfield, ofield, stokes) y los tres conjuntos de
residuos de Newton. Cada pipeline de residuo usa el producto interno de su campo.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import sparse

from ..exceptions import HapodError, StageError
from ..schemas.model_parameters_schema import ModelParameters
from ..schemas.run_config_schema import MeshSpec, SolverSettings
from .assembly import FIELDS, CellDiscretization
from .cell_dynamics import CellModel
from .scenarios import Scenario, build_discretization, initial_state

logger = logging.getLogger(__name__)

PIPELINES = ("pfield", "ofield", "stokes", "pfield_residual", "ofield_residual", "stokes_residual")

EIGENVALUE_FLOOR = 1e-14
ORTHONORMALITY_TOL = 1e-10


def pipeline_field(pipeline: str) -> str:
    return pipeline.removesuffix("_residual")


def is_residual_pipeline(pipeline: str) -> bool:
    return pipeline.endswith("_residual")


# --- Producto interno ---


class InnerProduct:
    """(x, y)_W = xᵀ W y con W SPD dispersa; `matrix=None` es la identidad."""

    def __init__(self, matrix: Optional[sparse.spmatrix] = None):
        self.matrix = None if matrix is None else sparse.csr_matrix(matrix)

    @classmethod
    def for_field(cls, disc: CellDiscretization, field_name: str, kind: str = "mass") -> "InnerProduct":
        return cls(disc.inner_product_matrix(pipeline_field(field_name), kind))

    @property
    def is_identity(self) -> bool:
        return self.matrix is None

    def apply(self, y: np.ndarray) -> np.ndarray:
        return y if self.matrix is None else self.matrix @ y

    def gram(self, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
        b = a if b is None else b
        return a.T @ self.apply(b)

    def norm(self, y: np.ndarray) -> float:
        return float(math.sqrt(max(float(y @ self.apply(y)), 0.0)))

    def is_positive(self, rng: np.random.Generator, n_probes: int = 100) -> bool:
        if self.matrix is None:
            return True
        probes = rng.normal(size=(self.matrix.shape[0], n_probes))
        return bool(np.all(np.einsum("ij,ij->j", probes, self.matrix @ probes) > 0))

    def describe(self) -> dict:
        if self.matrix is None:
            return {"kind": "identity"}
        return {"kind": "matrix", "n": int(self.matrix.shape[0]), "nnz": int(self.matrix.nnz)}


IDENTITY = InnerProduct()


# --- POD ---


@dataclass
class PodResult:
    modes: np.ndarray
    singular_values: np.ndarray
    n_inputs: int = 0

    @property
    def n_modes(self) -> int:
        return int(self.singular_values.size)

    @property
    def scaled(self) -> np.ndarray:
        """Modos escalados por sus valores singulares: la salida de un nodo no raíz."""
        return self.modes * self.singular_values


def _gram_schmidt(u: np.ndarray, inner: InnerProduct) -> np.ndarray:
    # dos pasadas de Gram-Schmidt modificado
    u = u.copy()
    for _ in range(2):
        for j in range(u.shape[1]):
            for i in range(j):
                u[:, j] -= (u[:, i] @ inner.apply(u[:, j])) * u[:, i]
            u[:, j] /= inner.norm(u[:, j])
    return u


def pod(snapshots: np.ndarray, inner: InnerProduct = IDENTITY, tol: float = 0.0) -> PodResult:
    """
    POD por el método de snapshots: G = SᵀWS, G = V Λ Vᵀ y U = S V_N diag(σ)⁻¹ con σ = √λ.

    N es el mínimo con Σ_{i>N} λ_i ≤ tol². Los autovalores menores que 1e-14·λ_max se tratan como
    nulos. Con tol = 0 se conservan todos los modos no nulos.
    """
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots.ndim != 2:
        raise HapodError(f"Se esperaba una matriz de snapshots, llegó forma {snapshots.shape}")
    n, s = snapshots.shape
    if s == 0:
        return PodResult(np.zeros((n, 0)), np.zeros(0), 0)
    if tol < 0:
        raise HapodError(f"Tolerancia negativa: {tol}")

    gram = inner.gram(snapshots)
    gram = 0.5 * (gram + gram.T)
    eigenvalues, eigenvectors = scipy.linalg.eigh(gram)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]

    top = eigenvalues[0] if eigenvalues.size else 0.0
    if top <= 0:
        return PodResult(np.zeros((n, 0)), np.zeros(0), s)
    eigenvalues = np.where(eigenvalues < EIGENVALUE_FLOOR * top, 0.0, eigenvalues)

    # tails[m] = Σ_{i≥m} λ_i, con tails[s] = 0
    tails = np.concatenate([np.cumsum(eigenvalues[::-1])[::-1], [0.0]])
    n_positive = int(np.count_nonzero(eigenvalues))
    n_modes = min(int(np.argmax(tails <= tol**2)), n_positive)

    sigma = np.sqrt(eigenvalues[:n_modes])
    modes = snapshots @ (eigenvectors[:, :n_modes] / sigma)
    if n_modes and np.max(np.abs(inner.gram(modes) - np.eye(n_modes))) > ORTHONORMALITY_TOL:
        modes = _gram_schmidt(modes, inner)
    return PodResult(modes, sigma, s)


def orth_project(modes: np.ndarray, inner: InnerProduct, y: np.ndarray) -> np.ndarray:
    """P_U y = U Uᵀ W y."""
    return modes @ (modes.T @ inner.apply(y))


def projection_errors(snapshots: np.ndarray, modes: np.ndarray, inner: InnerProduct = IDENTITY) -> np.ndarray:
    """‖s_j − P_U s_j‖_W por columna."""
    residual = snapshots - orth_project(modes, inner, snapshots)
    return np.sqrt(np.maximum(np.einsum("ij,ij->j", residual, inner.apply(residual)), 0.0))


def mean_projection_error(snapshots: np.ndarray, modes: np.ndarray, inner: InnerProduct = IDENTITY) -> float:
    """√(1/s Σ_j ‖s_j − P_U s_j‖²_W)"""
    errors = projection_errors(snapshots, modes, inner)
    return float(math.sqrt(np.mean(errors**2))) if errors.size else 0.0


# --- HAPOD ---


def local_tolerance(
    eps_star: float, omega: float, depth: int, n_snapshots: int, is_root: bool
) -> float:
    """
    Tolerancias locales que acotan el error medio de proyección por ε*:
    raíz → √|S|·ω·ε*, resto → √n·(L_T−1)^{−1/2}·√(1−ω²)·ε*.
    """
    if not 0.0 <= omega <= 1.0:
        raise HapodError(f"ω debe estar en [0, 1], llegó {omega}")
    if is_root:
        return math.sqrt(n_snapshots) * omega * eps_star
    if depth < 2:
        raise HapodError(f"Un nodo no raíz necesita profundidad L_T ≥ 2, llegó {depth}")
    return math.sqrt(n_snapshots / (depth - 1)) * math.sqrt(1.0 - omega**2) * eps_star


@dataclass
class HapodTree:
    """
    Árbol con raíz: `children[α]` lista los hijos de un nodo interno y `leaves[γ]` los índices de
    snapshots D(γ) de cada hoja. `tolerances` se completa con `with_tolerances` o a mano.
    """

    root: int
    children: dict[int, list[int]]
    leaves: dict[int, np.ndarray]
    tolerances: dict[int, float] = field(default_factory=dict)

    def nodes(self) -> list[int]:
        return sorted(set(self.children) | set(self.leaves))

    def is_leaf(self, node: int) -> bool:
        return node in self.leaves

    @property
    def depth(self) -> int:
        """Largo del camino hoja → raíz más largo, contando ambos extremos."""

        def _depth(node: int) -> int:
            if self.is_leaf(node):
                return 1
            return 1 + max(_depth(c) for c in self.children[node])

        return _depth(self.root)

    def leaf_count(self, node: int) -> int:
        if self.is_leaf(node):
            return int(self.leaves[node].size)
        return sum(self.leaf_count(c) for c in self.children[node])

    def validate(self, n_snapshots: int) -> None:
        parents = [c for kids in self.children.values() for c in kids]
        if len(parents) != len(set(parents)) or self.root in parents:
            raise HapodError("El árbol debe tener una única raíz y cada nodo un único padre")
        if set(self.leaves) & set(self.children):
            raise HapodError("Un nodo no puede ser hoja e interno a la vez")
        if set(parents) | {self.root} != set(self.nodes()):
            raise HapodError("Hay nodos desconectados de la raíz")
        indices = np.concatenate([np.asarray(d, dtype=int) for d in self.leaves.values()])
        if indices.size != n_snapshots or not np.array_equal(np.sort(indices), np.arange(n_snapshots)):
            raise HapodError("Los conjuntos D(γ) deben particionar los snapshots")
        if any(t < 0 for t in self.tolerances.values()):
            raise HapodError("Tolerancias locales negativas")

    def with_tolerances(self, eps_star: float, omega: float) -> "HapodTree":
        depth = self.depth
        tolerances = {
            node: local_tolerance(eps_star, omega, depth, self.leaf_count(node), node == self.root)
            for node in self.nodes()
        }
        return HapodTree(self.root, self.children, self.leaves, tolerances)

    # --- formas típicas ---

    @staticmethod
    def _split(n_snapshots: int, n_leaves: int) -> list[np.ndarray]:
        return [chunk for chunk in np.array_split(np.arange(n_snapshots), n_leaves) if chunk.size]

    @classmethod
    def chain(cls, n_snapshots: int, n_leaves: int) -> "HapodTree":
        """Árbol incremental: cada nodo interno une al anterior con una hoja nueva."""
        parts = cls._split(n_snapshots, n_leaves)
        leaves = {i: p for i, p in enumerate(parts)}
        if len(parts) == 1:
            return cls(0, {}, leaves)
        children, previous, node = {}, 0, len(parts)
        for leaf in range(1, len(parts)):
            children[node] = [previous, leaf]
            previous, node = node, node + 1
        return cls(previous, children, leaves)

    @classmethod
    def binary(cls, n_snapshots: int, n_leaves: int) -> "HapodTree":
        parts = cls._split(n_snapshots, n_leaves)
        leaves = {i: p for i, p in enumerate(parts)}
        level, children, node = list(leaves), {}, len(parts)
        while len(level) > 1:
            nxt = []
            for i in range(0, len(level), 2):
                pair = level[i : i + 2]
                if len(pair) == 1:
                    nxt.append(pair[0])
                    continue
                children[node] = pair
                nxt.append(node)
                node += 1
            level = nxt
        return cls(level[0], children, leaves)

    @classmethod
    def star(cls, n_snapshots: int, n_leaves: int) -> "HapodTree":
        parts = cls._split(n_snapshots, n_leaves)
        leaves = {i: p for i, p in enumerate(parts)}
        if len(parts) == 1:
            return cls(0, {}, leaves)
        root = len(parts)
        return cls(root, {root: list(leaves)}, leaves)


@dataclass
class HapodResult:
    modes: np.ndarray
    singular_values: np.ndarray
    max_local_modes: int
    max_input_vectors: int

    @property
    def n_modes(self) -> int:
        return int(self.singular_values.size)

    @property
    def scaled(self) -> np.ndarray:
        return self.modes * self.singular_values


def hapod(
    snapshots: np.ndarray, inner: InnerProduct, tree: HapodTree, node: Optional[int] = None
) -> HapodResult:
    """
    HAPOD recursiva. Las hojas toman S_{D(γ)}, los nodos internos concatenan los modos escalados de
    sus hijos; un nodo con tolerancia 0 pasa sus datos sin POD. Devuelve la POD local del nodo pedido
    (la raíz por defecto): hacia el padre se entrega `scaled`.
    """
    tree.validate(snapshots.shape[1])
    node = tree.root if node is None else node
    stats = {"modes": 0, "inputs": 0}

    def _pod(data: np.ndarray, tol: float) -> PodResult:
        result = pod(data, inner, tol)
        stats["modes"] = max(stats["modes"], result.n_modes)
        stats["inputs"] = max(stats["inputs"], data.shape[1])
        return result

    def _input(alpha: int) -> np.ndarray:
        if tree.is_leaf(alpha):
            return snapshots[:, tree.leaves[alpha]]
        return np.hstack([_output(c) for c in tree.children[alpha]])

    def _output(alpha: int) -> np.ndarray:
        data = _input(alpha)
        tol = tree.tolerances.get(alpha, 0.0)
        return data if tol == 0.0 else _pod(data, tol).scaled

    result = _pod(_input(node), tree.tolerances.get(node, 0.0))
    logger.debug(f"[HAPOD] nodo {node}: {result.n_modes} modos, máx. entradas {stats['inputs']}")
    return HapodResult(result.modes, result.singular_values, stats["modes"], stats["inputs"])


class IncrementalHapod:
    """
    Nodo incremental de un worker: cada chunk pasa por una POD de hoja y sus modos escalados se unen a
    los del nodo con una segunda POD. `finalize` combina los nodos de todos los workers en la raíz.
    """

    def __init__(self, inner: InnerProduct, eps_star: float, omega: float, depth: int):
        self.inner, self.eps_star, self.omega, self.depth = inner, eps_star, omega, depth
        self.node: Optional[np.ndarray] = None
        self.n_snapshots = 0
        self.max_local_modes = 0
        self.max_input_vectors = 0

    def _pod(self, data: np.ndarray, tol: float) -> PodResult:
        result = pod(data, self.inner, tol)
        self.max_local_modes = max(self.max_local_modes, result.n_modes)
        self.max_input_vectors = max(self.max_input_vectors, data.shape[1])
        return result

    def add_chunk(self, chunk: np.ndarray) -> None:
        if chunk.shape[1] == 0:
            return
        leaf_tol = local_tolerance(self.eps_star, self.omega, self.depth, chunk.shape[1], False)
        leaf = self._pod(chunk, leaf_tol).scaled
        self.n_snapshots += chunk.shape[1]
        data = leaf if self.node is None else np.hstack([self.node, leaf])
        node_tol = local_tolerance(self.eps_star, self.omega, self.depth, self.n_snapshots, False)
        self.node = self._pod(data, node_tol).scaled

    def output(self, n_rows: int) -> np.ndarray:
        return np.zeros((n_rows, 0)) if self.node is None else self.node

    @staticmethod
    def finalize(nodes: Sequence["IncrementalHapod"], n_rows: int) -> HapodResult:
        if not nodes:
            raise HapodError("No hay nodos que combinar")
        first = nodes[0]
        total = sum(n.n_snapshots for n in nodes)
        data = np.hstack([n.output(n_rows) for n in nodes])
        root_tol = local_tolerance(first.eps_star, first.omega, first.depth, total, True)
        root = pod(data, first.inner, root_tol)
        return HapodResult(
            root.modes,
            root.singular_values,
            max([root.n_modes] + [n.max_local_modes for n in nodes]),
            max([data.shape[1]] + [n.max_input_vectors for n in nodes]),
        )


# --- Driver por chunks (entrenamiento del modelo celular) ---


@dataclass(frozen=True)
class TrainingJob:
    """Trabajo de un worker: sus parámetros y todo lo necesario para reconstruir la discretización."""

    worker: int
    parameters: tuple[ModelParameters, ...]
    mesh: MeshSpec
    scenario: Scenario
    dt: float
    n_steps: int
    chunk_size: int
    tolerances: dict[str, tuple[float, ...]]
    omega: float
    depth: int
    inner_product: str = "mass"
    solvers: Optional[SolverSettings] = None


@dataclass
class WorkerOutput:
    worker: int
    nodes: dict[tuple[str, float], IncrementalHapod]
    n_chunks: int
    n_snapshots: dict[str, int]
    elapsed: float


def chunk_count(n_steps: int, chunk_size: int) -> int:
    """Chunks por trayectoria: K+1 estados contando el inicial."""
    return math.ceil((n_steps + 1) / chunk_size)


def _chunks(model: CellModel, state, n_steps: int, chunk_size: int):
    """Genera (estados, residuos por campo) de a `chunk_size` estados; el primero incluye el inicial."""
    states, residuals = [state], {f: [] for f in FIELDS}
    for new_state, record in model.iterate(state, n_steps, capture=True):
        if len(states) == chunk_size:
            yield states, residuals
            states, residuals = [], {f: [] for f in FIELDS}
        states.append(new_state)
        for name in FIELDS:
            residuals[name].extend(record.residuals[name])
    if states:
        yield states, residuals


def _matrix(columns: list[np.ndarray], n_rows: int) -> np.ndarray:
    return np.column_stack(columns) if columns else np.zeros((n_rows, 0))


def run_training_job(job: TrainingJob) -> WorkerOutput:
    """Simula los parámetros del worker por chunks y alimenta un nodo incremental por (pipeline, tol)."""
    started = time.perf_counter()
    disc = build_discretization(job.mesh, job.scenario)
    inners = {f: InnerProduct.for_field(disc, f, job.inner_product) for f in FIELDS}
    nodes = {
        (pipeline, tol): IncrementalHapod(inners[pipeline_field(pipeline)], tol, job.omega, job.depth)
        for pipeline, tols in job.tolerances.items()
        for tol in tols
    }
    counts = {p: 0 for p in job.tolerances}
    n_chunks = 0
    for params in job.parameters:
        model = CellModel(disc, params, job.dt, job.solvers)
        state = initial_state(disc, job.scenario, params.epsilon)
        try:
            for states, residuals in _chunks(model, state, job.n_steps, job.chunk_size):
                n_chunks += 1
                for (pipeline, _), node in nodes.items():
                    name = pipeline_field(pipeline)
                    if is_residual_pipeline(pipeline):
                        chunk = _matrix(residuals[name], disc.field_size(name))
                    else:
                        chunk = _matrix([s.field(name) for s in states], disc.field_size(name))
                    node.add_chunk(chunk)
                for pipeline in counts:
                    name = pipeline_field(pipeline)
                    counts[pipeline] += len(residuals[name]) if is_residual_pipeline(pipeline) else len(states)
        except StageError as e:
            raise HapodError(
                f"Worker {job.worker}: la simulación con Ca={params.ca:.4g}, Pa={params.pa:.4g} "
                f"falló tras {n_chunks} chunks: {e}"
            ) from e
        logger.info(f"[HAPOD] worker {job.worker}: Ca={params.ca:.4g}, Pa={params.pa:.4g} listo")
    return WorkerOutput(job.worker, nodes, n_chunks, counts, time.perf_counter() - started)


@dataclass
class ModeCount:
    pipeline: str
    tolerance: float
    final_modes: int
    max_local_modes: int
    max_input_vectors: int
    n_snapshots: int


@dataclass
class HapodTraining:
    bases: dict[tuple[str, float], HapodResult]
    mode_counts: list[ModeCount]
    n_snapshots: dict[str, int]
    depth: int
    n_workers: int
    elapsed: float

    def basis(self, pipeline: str, tol: float) -> HapodResult:
        try:
            return self.bases[(pipeline, tol)]
        except KeyError:
            raise HapodError(f"No hay base para '{pipeline}' con tolerancia {tol:g}") from None


def distribute(parameters: Sequence[ModelParameters], n_workers: int) -> list[tuple[ModelParameters, ...]]:
    """Reparto round-robin; ningún worker queda vacío."""
    n_workers = max(1, min(n_workers, len(parameters)))
    return [tuple(parameters[i::n_workers]) for i in range(n_workers)]


def chunked_hapod_driver(
    mesh: MeshSpec,
    scenario: Scenario,
    parameters: Sequence[ModelParameters],
    chunk_size: int,
    tolerances: dict[str, Sequence[float]],
    omega: float,
    n_workers: int = 1,
    dt: float = 1e-3,
    t_end: float = 0.2,
    inner_product: str = "mass",
    solvers: Optional[SolverSettings] = None,
) -> HapodTraining:
    """
    HAPOD del modelo celular: cada worker es una cadena de nodos incrementales y la raíz combina los
    nodos de todos los workers. Una sola pasada de entrenamiento alimenta todas las tolerancias.

    La profundidad es la del árbol realizado: (chunks del worker más cargado) + 2.
    """
    if chunk_size < 1:
        raise HapodError(f"El tamaño de chunk debe ser ≥ 1, llegó {chunk_size}")
    if not parameters:
        raise HapodError("Se necesita al menos un parámetro de entrenamiento")
    unknown = set(tolerances) - set(PIPELINES)
    if unknown:
        raise HapodError(f"Pipelines desconocidos: {sorted(unknown)}")

    started = time.perf_counter()
    n_steps = int(math.ceil(t_end / dt - 1e-9)) if t_end > 0 else 0
    groups = distribute(parameters, n_workers)
    depth = max(len(g) for g in groups) * chunk_count(n_steps, chunk_size) + 2
    jobs = [
        TrainingJob(
            worker=i, parameters=g, mesh=mesh, scenario=scenario, dt=dt, n_steps=n_steps,
            chunk_size=chunk_size, tolerances={p: tuple(t) for p, t in tolerances.items()},
            omega=omega, depth=depth, inner_product=inner_product, solvers=solvers,
        )
        for i, g in enumerate(groups)
    ]
    logger.info(
        f"[HAPOD] {len(parameters)} parámetros en {len(jobs)} workers, "
        f"{n_steps} pasos, chunk={chunk_size}, L_T={depth}"
    )

    if len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            outputs = list(pool.map(run_training_job, jobs))
    else:
        outputs = [run_training_job(jobs[0])]

    disc = build_discretization(mesh, scenario)
    bases, counts = {}, []
    n_snapshots = {p: sum(o.n_snapshots[p] for o in outputs) for p in tolerances}
    for pipeline, tols in tolerances.items():
        n_rows = disc.field_size(pipeline_field(pipeline))
        for tol in tols:
            result = IncrementalHapod.finalize([o.nodes[(pipeline, tol)] for o in outputs], n_rows)
            bases[(pipeline, tol)] = result
            counts.append(
                ModeCount(pipeline, tol, result.n_modes, result.max_local_modes,
                          result.max_input_vectors, n_snapshots[pipeline])
            )
            logger.info(
                f"[HAPOD] {pipeline} tol={tol:g}: {result.n_modes} modos "
                f"(máx. local {result.max_local_modes}, máx. entradas {result.max_input_vectors})"
            )
    return HapodTraining(bases, counts, n_snapshots, depth, len(jobs), time.perf_counter() - started)
