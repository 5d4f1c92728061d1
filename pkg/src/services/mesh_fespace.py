"""
Mallas estructuradas 2D y espacios de Lagrange sobre ellas.

La numeración es determinista: vértices y celdas en orden lexicográfico por (iy, ix), aristas en el
orden de `np.unique` sobre los pares de vértices ordenados. Los DOFs de orden 2 son: vértices, luego
puntos medios de aristas y, en cuadriláteros, centros de celda.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Literal, Sequence, Union

import numpy as np
from scipy import sparse

from ..exceptions import MeshError

logger = logging.getLogger(__name__)

CellKind = Literal["simplicial", "rectangular"]
Bounds = tuple[float, float, float, float]

BOTTOM, RIGHT, TOP, LEFT = 0, 1, 2, 3


@dataclass(frozen=True, eq=False)
class Mesh:
    """Malla estructurada de [x0,x1]×[y0,y1] con celdas simpliciales o rectangulares."""

    nx: int
    ny: int
    bounds: Bounds
    cell_kind: CellKind
    vertices: np.ndarray
    elements: np.ndarray
    edges: np.ndarray
    element_edges: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def area(self) -> float:
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) * (y1 - y0)

    @property
    def h(self) -> float:
        x0, x1, y0, y1 = self.bounds
        return max((x1 - x0) / self.nx, (y1 - y0) / self.ny)

    @cached_property
    def edge_element_counts(self) -> np.ndarray:
        return np.bincount(self.element_edges.ravel(), minlength=self.n_edges)

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Jacobianas (ne, 2, 2) de las transformaciones afines desde el elemento de referencia."""
        coords = self.vertices[self.elements]
        v0 = coords[:, 0]
        # cuadriláteros axis-aligned: la transformación también es afín, con columnas v1-v0 y v3-v0
        second = coords[:, 2] if self.cell_kind == "simplicial" else coords[:, 3]
        return np.stack([coords[:, 1] - v0, second - v0], axis=2)


def build_mesh(
    nx: int,
    ny: int,
    bounds: Sequence[float] = (0.0, 1.0, 0.0, 1.0),
    cell_kind: CellKind = "simplicial",
) -> Mesh:
    """
    Construye la malla estructurada.

    Cada celda simplicial se divide por la diagonal inferior-izquierda a superior-derecha en los
    triángulos (v00, v10, v11) y (v00, v11, v01), ambos en sentido antihorario.
    """
    if nx < 1 or ny < 1:
        raise MeshError(f"La malla necesita al menos una celda por eje (nx={nx}, ny={ny})")
    if cell_kind not in ("simplicial", "rectangular"):
        raise MeshError(f"Tipo de celda no soportado: {cell_kind}")
    x0, x1, y0, y1 = (float(b) for b in bounds)
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"Dominio degenerado: {bounds}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    grid_x, grid_y = np.meshgrid(xs, ys)
    vertices = np.column_stack([grid_x.ravel(), grid_y.ravel()])

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (iy * (nx + 1) + ix).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    if cell_kind == "simplicial":
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
    else:
        elements = np.column_stack([v00, v10, v11, v01])

    n_local = elements.shape[1]
    local_edges = np.stack([elements, np.roll(elements, -1, axis=1)], axis=2).reshape(-1, 2)
    edges, inverse, counts = np.unique(
        np.sort(local_edges, axis=1), axis=0, return_inverse=True, return_counts=True
    )
    element_edges = np.asarray(inverse).reshape(-1, n_local)
    if counts.max() > 2:
        raise MeshError("Arista compartida por más de dos elementos")

    boundary_edges = np.flatnonzero(counts == 1)
    midpoints = vertices[edges[boundary_edges]].mean(axis=1)
    markers = np.full(boundary_edges.shape[0], -1, dtype=int)
    scale = max(x1 - x0, y1 - y0)
    markers[np.isclose(midpoints[:, 1], y0, atol=1e-12 * scale)] = BOTTOM
    markers[np.isclose(midpoints[:, 0], x1, atol=1e-12 * scale)] = RIGHT
    markers[np.isclose(midpoints[:, 1], y1, atol=1e-12 * scale)] = TOP
    markers[np.isclose(midpoints[:, 0], x0, atol=1e-12 * scale)] = LEFT
    if np.any(markers < 0):
        raise MeshError("Arista de borde sin marcador")

    for array in (vertices, elements, edges, element_edges, boundary_edges, markers):
        array.setflags(write=False)
    logger.debug(f"[Mesh] {nx}x{ny} {cell_kind}: {elements.shape[0]} elementos, {vertices.shape[0]} vértices")
    return Mesh(
        nx=nx,
        ny=ny,
        bounds=(x0, x1, y0, y1),
        cell_kind=cell_kind,
        vertices=vertices,
        elements=elements,
        edges=edges,
        element_edges=element_edges,
        boundary_edges=boundary_edges,
        boundary_markers=markers,
    )


# --- Elementos de referencia y cuadratura ---


def quadrature(cell_kind: CellKind, n_points: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Regla de Gauss en el elemento de referencia.

    Cuadriláteros: producto tensorial de Gauss-Legendre en [0,1]². Triángulos: regla colapsada
    (Duffy) sobre el triángulo unitario, exacta para grado total ≤ 2·n_points − 2.
    """
    g, w = np.polynomial.legendre.leggauss(n_points)
    a = 0.5 * (g + 1.0)
    wa = 0.5 * w
    if cell_kind == "rectangular":
        xi, eta = np.meshgrid(a, a, indexing="ij")
        weights = np.outer(wa, wa)
    else:
        xi = np.repeat(a[:, None], n_points, axis=1)
        eta = a[None, :] * (1.0 - a[:, None])
        weights = wa[:, None] * wa[None, :] * (1.0 - a[:, None])
    return np.column_stack([xi.ravel(), eta.ravel()]), weights.ravel()


def _lagrange_1d(nodes: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = np.ones((nodes.size, x.size))
    derivatives = np.zeros((nodes.size, x.size))
    for k, xk in enumerate(nodes):
        others = [xm for m, xm in enumerate(nodes) if m != k]
        denom = np.prod([xk - xm for xm in others])
        factors = [(x - xm) for xm in others]
        values[k] = np.prod(factors, axis=0) / denom
        for skip in range(len(others)):
            rest = [f for i, f in enumerate(factors) if i != skip]
            derivatives[k] += (np.prod(rest, axis=0) if rest else 1.0) / denom
    return values, derivatives


def _quad_local_indices(order: int) -> list[tuple[int, int]]:
    last = order
    corners = [(0, 0), (last, 0), (last, last), (0, last)]
    if order == 1:
        return corners
    return corners + [(1, 0), (2, 1), (1, 2), (0, 1), (1, 1)]


def reference_basis(cell_kind: CellKind, order: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Valores (n_loc, nq) y gradientes (n_loc, nq, 2) de la base nodal en el elemento de referencia."""
    xi, eta = points[:, 0], points[:, 1]
    if cell_kind == "rectangular":
        nodes = np.linspace(0.0, 1.0, order + 1)
        lx, dlx = _lagrange_1d(nodes, xi)
        ly, dly = _lagrange_1d(nodes, eta)
        pairs = _quad_local_indices(order)
        values = np.array([lx[i] * ly[j] for i, j in pairs])
        grads = np.array([np.column_stack([dlx[i] * ly[j], lx[i] * dly[j]]) for i, j in pairs])
        return values, grads

    lam = np.array([1.0 - xi - eta, xi, eta])
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    nq = points.shape[0]
    if order == 1:
        return lam, np.broadcast_to(dlam[:, None, :], (3, nq, 2)).copy()
    values = [lam[i] * (2.0 * lam[i] - 1.0) for i in range(3)]
    grads = [(4.0 * lam[i] - 1.0)[:, None] * dlam[i][None, :] for i in range(3)]
    for a, b in ((0, 1), (1, 2), (2, 0)):
        values.append(4.0 * lam[a] * lam[b])
        grads.append(4.0 * (lam[b][:, None] * dlam[a][None, :] + lam[a][:, None] * dlam[b][None, :]))
    return np.array(values), np.array(grads)


# --- Espacios ---


@dataclass(frozen=True, eq=False)
class FunctionSpace:
    """
    Espacio de Lagrange escalar de orden `order` (o producto de `components` copias).

    `element_dofs` y `nodes` usan la numeración sin restricciones; con `dirichlet=True` los DOFs de
    borde se eliminan y `full_to_free` mapea a la numeración reducida (-1 en los restringidos).
    """

    mesh: Mesh
    order: int
    dirichlet: bool
    components: int
    element_dofs: np.ndarray
    nodes: np.ndarray
    boundary_dofs: np.ndarray
    free_dofs: np.ndarray
    full_to_free: np.ndarray

    @property
    def full_dof_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def dof_count(self) -> int:
        return self.free_dofs.shape[0]

    @property
    def dim(self) -> int:
        return self.components * self.dof_count

    @cached_property
    def free_element_dofs(self) -> np.ndarray:
        return self.full_to_free[self.element_dofs]

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """Matriz DOF (numeración completa) × elemento, 1 donde el DOF pertenece al elemento."""
        n_el, n_loc = self.element_dofs.shape
        rows = self.element_dofs.ravel()
        cols = np.repeat(np.arange(n_el), n_loc)
        matrix = sparse.coo_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(self.full_dof_count, n_el)
        ).tocsr()
        matrix.sum_duplicates()
        return matrix

    def element_star(self, full_dof: int) -> np.ndarray:
        """Elementos que contienen el DOF dado (numeración completa)."""
        start, stop = self.incidence.indptr[full_dof], self.incidence.indptr[full_dof + 1]
        return self.incidence.indices[start:stop]

    def vector(self, components: int = 2) -> "FunctionSpace":
        return replace(self, components=components)

    def extend(self, values: np.ndarray) -> np.ndarray:
        """Coeficientes libres → numeración completa con ceros en el borde, por componente."""
        values = np.asarray(values, dtype=float).reshape(self.components, self.dof_count)
        full = np.zeros((self.components, self.full_dof_count))
        full[:, self.free_dofs] = values
        return full.ravel()


def make_space(mesh: Mesh, order: int, dirichlet: bool = False, components: int = 1) -> FunctionSpace:
    if order not in (1, 2):
        raise MeshError(f"Orden polinomial no soportado: {order}")
    nv = mesh.n_vertices
    vertices = mesh.vertices
    if order == 1:
        element_dofs = np.array(mesh.elements)
        nodes = vertices
    else:
        edge_ids = nv + mesh.element_edges
        midpoints = vertices[mesh.edges].mean(axis=1)
        if mesh.cell_kind == "simplicial":
            element_dofs = np.hstack([mesh.elements, edge_ids])
            nodes = np.vstack([vertices, midpoints])
        else:
            centers = vertices[mesh.elements].mean(axis=1)
            cell_ids = nv + mesh.n_edges + np.arange(mesh.n_elements)
            element_dofs = np.hstack([mesh.elements, edge_ids, cell_ids[:, None]])
            nodes = np.vstack([vertices, midpoints, centers])

    boundary_vertices = np.unique(mesh.edges[mesh.boundary_edges].ravel())
    boundary = boundary_vertices if order == 1 else np.concatenate([boundary_vertices, nv + mesh.boundary_edges])
    boundary = np.sort(boundary)
    n_full = nodes.shape[0]
    if dirichlet:
        mask = np.ones(n_full, dtype=bool)
        mask[boundary] = False
        free = np.flatnonzero(mask)
    else:
        free = np.arange(n_full)
    full_to_free = np.full(n_full, -1, dtype=int)
    full_to_free[free] = np.arange(free.size)
    for array in (element_dofs, nodes, boundary, free, full_to_free):
        array.setflags(write=False)
    return FunctionSpace(
        mesh=mesh,
        order=order,
        dirichlet=dirichlet,
        components=components,
        element_dofs=element_dofs,
        nodes=nodes,
        boundary_dofs=boundary,
        free_dofs=free,
        full_to_free=full_to_free,
    )


@dataclass(frozen=True, eq=False)
class CoefficientVector:
    """Coeficientes de un campo; los vectoriales van por componente (todo x, luego todo y)."""

    space: FunctionSpace
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.space.dim,):
            raise MeshError(
                f"Longitud de coeficientes {self.values.shape} no coincide con dim {self.space.dim}"
            )

    def component(self, i: int) -> np.ndarray:
        n = self.space.dof_count
        return self.values[i * n : (i + 1) * n]


PointFunction = Callable[[np.ndarray, np.ndarray], Union[np.ndarray, float, Sequence]]


def interpolate(space: FunctionSpace, f: PointFunction) -> CoefficientVector:
    """
    Interpolación nodal de Lagrange. `f(x, y)` recibe arrays de coordenadas; para espacios
    vectoriales devuelve una secuencia con una entrada por componente.
    """
    nodes = space.nodes[space.free_dofs]
    x, y = nodes[:, 0], nodes[:, 1]
    result = f(x, y)
    if space.components == 1:
        values = np.broadcast_to(np.asarray(result, dtype=float), x.shape).astype(float)
    else:
        if len(result) != space.components:
            raise MeshError(f"Se esperaban {space.components} componentes")
        values = np.concatenate(
            [np.broadcast_to(np.asarray(c, dtype=float), x.shape) for c in result]
        ).astype(float)
    return CoefficientVector(space, values)


# --- Geometría de la célula ---


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]


Shape = Union[Circle, Polygon]


def points_in_polygon(polygon: Polygon, points: np.ndarray) -> np.ndarray:
    """Regla par-impar con rayo horizontal hacia +x."""
    verts = np.asarray(polygon.vertices, dtype=float)
    a, b = verts, np.roll(verts, -1, axis=0)
    px, py = points[:, 0][:, None], points[:, 1][:, None]
    straddles = (a[None, :, 1] > py) != (b[None, :, 1] > py)
    dy = np.where(b[:, 1] == a[:, 1], 1.0, b[:, 1] - a[:, 1])
    x_cross = a[None, :, 0] + (py - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / dy[None, :]
    crossings = np.sum(straddles & (px < x_cross), axis=1)
    return crossings % 2 == 1


def _distance_to_polygon(polygon: Polygon, points: np.ndarray) -> np.ndarray:
    verts = np.asarray(polygon.vertices, dtype=float)
    a, b = verts, np.roll(verts, -1, axis=0)
    ab = b - a
    length2 = np.einsum("ek,ek->e", ab, ab)
    # aristas de longitud cero (vértices repetidos): el punto más cercano es el propio vértice
    ap = points[:, None, :] - a[None, :, :]
    t = np.einsum("pek,ek->pe", ap, ab) / np.where(length2 > 0, length2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    return np.min(np.linalg.norm(points[:, None, :] - closest, axis=2), axis=1)


def signed_distance(shape: Shape, x: np.ndarray) -> Union[float, np.ndarray]:
    """Distancia con signo a la membrana: positiva dentro, negativa fuera, cero en el borde."""
    points = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(shape, Circle):
        dist = shape.radius - np.linalg.norm(points - np.asarray(shape.center, dtype=float), axis=1)
    else:
        if len(shape.vertices) < 3:
            raise MeshError("Un polígono necesita al menos 3 vértices")
        unsigned = _distance_to_polygon(shape, points)
        dist = np.where(points_in_polygon(shape, points), unsigned, -unsigned)
    return float(dist[0]) if np.ndim(x) == 1 else dist
