"""
Ensamblado de operadores de elementos finitos para las tres etapas del modelo.

`ElementBasis` guarda valores y gradientes de la base en los puntos de cuadratura de un subconjunto de
elementos; `CellDiscretization` agrupa el espacio escalar de orden p (campo de fase, orientación,
presión) y el espacio de velocidad de orden p+1 con Dirichlet, opcionalmente restringidos a un parche
de elementos con numeración local. El modelo completo y los evaluadores restringidos de DEIM usan
exactamente las mismas rutinas.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy import sparse

from ..exceptions import AssemblyError, MeshError
from .mesh_fespace import FunctionSpace, Mesh, make_space, quadrature, reference_basis

logger = logging.getLogger(__name__)

FIELDS = ("pfield", "ofield", "stokes")


class ElementBasis:
    """Base de un espacio evaluada en los puntos de cuadratura de `elements`."""

    def __init__(
        self,
        space: FunctionSpace,
        elements: Optional[np.ndarray] = None,
        dofs: Optional[np.ndarray] = None,
        n_dofs: Optional[int] = None,
        n_points: Optional[int] = None,
    ):
        mesh = space.mesh
        self.space = space
        self.elements = np.arange(mesh.n_elements) if elements is None else np.asarray(elements, dtype=int)
        points, weights = quadrature(mesh.cell_kind, n_points or 2 * space.order + 2)
        self.phi, dphi_ref = reference_basis(mesh.cell_kind, space.order, points)

        jac = mesh.jacobians[self.elements]
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
        self.dphi = np.einsum("eab,iqb->eiqa", inv_t, dphi_ref)
        self.dx = np.abs(det)[:, None] * weights[None, :]
        origin = mesh.vertices[mesh.elements[self.elements, 0]]
        self.points = origin[:, None, :] + np.einsum("eab,qb->eqa", jac, points)

        if dofs is None:
            dofs = space.free_element_dofs[self.elements]
            n_dofs = space.dof_count
        self.dofs = np.asarray(dofs, dtype=int)
        self.n_dofs = int(n_dofs)

    @property
    def n_elements(self) -> int:
        return self.elements.size

    def interpolate(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Valores (ne, nq) y gradientes (ne, nq, 2) de un campo escalar dado por sus coeficientes."""
        if values.shape != (self.n_dofs,):
            raise AssemblyError(f"Coeficientes de longitud {values.shape}, se esperaba {self.n_dofs}")
        local = np.append(values, 0.0)[self.dofs]
        return np.einsum("ei,iq->eq", local, self.phi), np.einsum("ei,eiqa->eqa", local, self.dphi)


def _as_basis(space_or_basis: Union[FunctionSpace, ElementBasis]) -> ElementBasis:
    if isinstance(space_or_basis, ElementBasis):
        return space_or_basis
    return ElementBasis(space_or_basis)


def _matrix(test: ElementBasis, trial: ElementBasis, local: np.ndarray) -> sparse.csr_matrix:
    rows = np.broadcast_to(test.dofs[:, :, None], local.shape)
    cols = np.broadcast_to(trial.dofs[:, None, :], local.shape)
    keep = (rows >= 0) & (cols >= 0)
    matrix = sparse.coo_matrix(
        (local[keep], (rows[keep], cols[keep])), shape=(test.n_dofs, trial.n_dofs)
    ).tocsr()
    matrix.eliminate_zeros()
    return matrix


def _vector(test: ElementBasis, local: np.ndarray) -> np.ndarray:
    keep = test.dofs >= 0
    return np.bincount(test.dofs[keep], weights=local[keep], minlength=test.n_dofs)


def _symmetrize(matrix: sparse.csr_matrix) -> sparse.csr_matrix:
    return ((matrix + matrix.T) * 0.5).tocsr()


def _weighted_mass(basis: ElementBasis, weight: np.ndarray) -> sparse.csr_matrix:
    local = np.einsum("iq,jq,eq->eij", basis.phi, basis.phi, basis.dx * weight)
    return _matrix(basis, basis, local)


def load_vector(basis: ElementBasis, weight: np.ndarray) -> np.ndarray:
    """∫ w φ_i con w dado en los puntos de cuadratura (ne, nq)."""
    return _vector(basis, np.einsum("iq,eq->ei", basis.phi, basis.dx * weight))


def assemble_mass(space: Union[FunctionSpace, ElementBasis]) -> sparse.csr_matrix:
    """M_ij = ∫ φ_i φ_j (escalar)."""
    basis = _as_basis(space)
    return _symmetrize(_weighted_mass(basis, np.ones_like(basis.dx)))


def assemble_stiffness(space: Union[FunctionSpace, ElementBasis]) -> sparse.csr_matrix:
    """E_ij = ∫ ∇φ_i · ∇φ_j (escalar)."""
    basis = _as_basis(space)
    local = np.einsum("eiqa,ejqa,eq->eij", basis.dphi, basis.dphi, basis.dx)
    return _symmetrize(_matrix(basis, basis, local))


def _block_diag(*blocks: sparse.spmatrix) -> sparse.csr_matrix:
    return sparse.block_diag(blocks, format="csr")


class CellDiscretization:
    """
    Espacios de Taylor-Hood sobre una malla: P_p escalar y P_{p+1} vectorial con Dirichlet.

    Con `elements` se obtiene una discretización restringida: sólo esos elementos se recorren y los DOFs
    se renumeran localmente (`p_global`, `u_global` dan el mapeo local → global).
    """

    def __init__(self, mesh: Mesh, order: int = 1, elements: Optional[np.ndarray] = None):
        if order not in (1,):
            # P2 escalar exigiría velocidad P3
            raise MeshError(f"Orden {order} no soportado para el par Taylor-Hood")
        self.mesh = mesh
        self.order = order
        self.scalar_space = make_space(mesh, order)
        self.velocity_space = make_space(mesh, order + 1, dirichlet=True)
        self.is_restricted = elements is not None
        self.elements = np.arange(mesh.n_elements) if elements is None else np.unique(elements)

        p_dofs = self.scalar_space.element_dofs[self.elements]
        u_dofs = self.velocity_space.free_element_dofs[self.elements]
        if self.is_restricted:
            self.p_global, inverse = np.unique(p_dofs, return_inverse=True)
            p_dofs = np.asarray(inverse).reshape(p_dofs.shape)
            self.u_global = np.unique(u_dofs[u_dofs >= 0])
            u_dofs = np.where(u_dofs >= 0, np.searchsorted(self.u_global, u_dofs), -1)
        else:
            self.p_global = np.arange(self.scalar_space.dof_count)
            self.u_global = np.arange(self.velocity_space.dof_count)

        n_points = 2 * order + 2
        self.scalar_basis = ElementBasis(self.scalar_space, self.elements, p_dofs, self.p_global.size, n_points)
        self.velocity_basis = ElementBasis(
            self.velocity_space, self.elements, u_dofs, self.u_global.size, n_points
        )

    # --- tamaños ---

    @property
    def n_p(self) -> int:
        return self.p_global.size

    @property
    def n_u(self) -> int:
        return self.u_global.size

    def field_size(self, field: str) -> int:
        return {"pfield": 3 * self.n_p, "ofield": 4 * self.n_p, "stokes": 2 * self.n_u + self.n_p}[field]

    def restrict(self, elements: np.ndarray) -> "CellDiscretization":
        if self.is_restricted:
            raise AssemblyError("Sólo se puede restringir la discretización completa")
        return CellDiscretization(self.mesh, self.order, elements)

    def stacked_global_indices(self, field: str) -> np.ndarray:
        """Índices en el vector apilado global de cada entrada del vector apilado local."""
        n_p = self.scalar_space.dof_count
        n_u = self.velocity_space.dof_count
        if field == "pfield":
            return np.concatenate([k * n_p + self.p_global for k in range(3)])
        if field == "ofield":
            return np.concatenate([k * n_p + self.p_global for k in range(4)])
        return np.concatenate([self.u_global, n_u + self.u_global, 2 * n_u + self.p_global])

    def stacked_dof_star(self, field: str, index: int) -> np.ndarray:
        """Elementos cuya contribución local toca la fila `index` del residuo apilado del campo."""
        n_p = self.scalar_space.dof_count
        n_u = self.velocity_space.dof_count
        if field in ("pfield", "ofield"):
            return self.scalar_space.element_star(int(index) % n_p)
        if index < 2 * n_u:
            full = self.velocity_space.free_dofs[int(index) % n_u]
            return self.velocity_space.element_star(full)
        return self.scalar_space.element_star(int(index) - 2 * n_u)

    # --- operadores independientes del estado ---

    @cached_property
    def mass(self) -> sparse.csr_matrix:
        return assemble_mass(self.scalar_basis)

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        return assemble_stiffness(self.scalar_basis)

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        return np.asarray(self.mass.sum(axis=1)).ravel()

    @cached_property
    def velocity_mass(self) -> sparse.csr_matrix:
        return assemble_mass(self.velocity_basis)

    @cached_property
    def velocity_laplacian(self) -> sparse.csr_matrix:
        """A = ½ ∫ ∇ψ_i : ∇ψ_j sobre el espacio vectorial con Dirichlet."""
        half = assemble_stiffness(self.velocity_basis) * 0.5
        return _block_diag(half, half)

    @cached_property
    def divergence(self) -> sparse.csr_matrix:
        """B_ij = ∫ φ_i div ψ_j, de tamaño n_p × 2 n_u."""
        p, u = self.scalar_basis, self.velocity_basis
        blocks = [
            _matrix(p, u, np.einsum("iq,ejq,eq->eij", p.phi, u.dphi[..., a], p.dx)) for a in range(2)
        ]
        return sparse.hstack(blocks, format="csr")

    def inner_product_matrix(self, field: str, kind: str = "mass") -> Optional[sparse.csr_matrix]:
        """Matriz W del producto interno del campo (None = identidad)."""
        if kind == "identity":
            return None
        m = self.mass
        if field == "pfield":
            return _block_diag(m, m, m)
        if field == "ofield":
            return _block_diag(m, m, m, m)
        mu = self.velocity_mass
        return _block_diag(mu, mu, m)

    # --- evaluación de campos ---

    def velocity(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocidad (ne, nq, 2) y gradiente G[..., a, b] = ∂_b u_a en cuadratura."""
        if u.shape != (2 * self.n_u,):
            raise AssemblyError(f"Velocidad de longitud {u.shape}, se esperaba {2 * self.n_u}")
        comps = [self.velocity_basis.interpolate(u[a * self.n_u : (a + 1) * self.n_u]) for a in range(2)]
        values = np.stack([c[0] for c in comps], axis=-1)
        grads = np.stack([c[1] for c in comps], axis=-2)
        return values, grads

    def director(self, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Campo vectorial de orden p: valores (ne, nq, 2) y gradiente G[..., a, b] = ∂_b d_a."""
        if d.shape != (2 * self.n_p,):
            raise AssemblyError(f"Campo vectorial de longitud {d.shape}, se esperaba {2 * self.n_p}")
        comps = [self.scalar_basis.interpolate(d[a * self.n_p : (a + 1) * self.n_p]) for a in range(2)]
        return np.stack([c[0] for c in comps], axis=-1), np.stack([c[1] for c in comps], axis=-2)


# --- Campo de fase ---


def assemble_convection_pfield(disc: CellDiscretization, u: np.ndarray) -> sparse.csr_matrix:
    """B(u)_ij = ∫ (u·∇φ_i) φ_j."""
    basis = disc.scalar_basis
    velocity, _ = disc.velocity(u)
    local = np.einsum("eqa,eiqa,jq,eq->eij", velocity, basis.dphi, basis.phi, basis.dx)
    return _matrix(basis, basis, local)


def double_well_vectors(disc: CellDiscretization, phi: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """f_i = ∫ W''(φ) μ φ_i y g_i = ∫ W'(φ) φ_i con W = ¼(φ²−1)²."""
    basis = disc.scalar_basis
    phi_q, _ = basis.interpolate(phi)
    mu_q, _ = basis.interpolate(mu)
    return load_vector(basis, (3.0 * phi_q**2 - 1.0) * mu_q), load_vector(basis, phi_q**3 - phi_q)


def director_norm_vector(disc: CellDiscretization, d: np.ndarray) -> np.ndarray:
    """a_i = ∫ |d|² φ_i."""
    values, _ = disc.director(d)
    return load_vector(disc.scalar_basis, np.sum(values**2, axis=-1))


def assemble_pfield_nonlinears(
    disc: CellDiscretization, phi: np.ndarray, mu: np.ndarray, d: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f, g = double_well_vectors(disc, phi, mu)
    return f, g, director_norm_vector(disc, d)


def assemble_pfield_jacobian_blocks(
    disc: CellDiscretization, phi: np.ndarray, mu: np.ndarray
) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """D_φf = ∫ 6φμ φ_iφ_j y D_μf = D_φg = ∫ (3φ²−1) φ_iφ_j."""
    basis = disc.scalar_basis
    phi_q, _ = basis.interpolate(phi)
    mu_q, _ = basis.interpolate(mu)
    return _weighted_mass(basis, 6.0 * phi_q * mu_q), _weighted_mass(basis, 3.0 * phi_q**2 - 1.0)


# --- Campo de orientación ---


@dataclass(frozen=True)
class OrientationOperators:
    mass: sparse.csr_matrix
    stiffness: sparse.csr_matrix
    convection: sparse.csr_matrix
    coupling_mass: sparse.csr_matrix
    nonlinear: np.ndarray
    nonlinear_jacobian: sparse.csr_matrix


def orientation_convection(disc: CellDiscretization, u: np.ndarray, xi: float) -> sparse.csr_matrix:
    """B_of(u), bloque (b, a): δ_ab ∫(u·∇φ_j)φ_i + ∫ (Ω(u) − ξD(u))_ba φ_jφ_i."""
    basis = disc.scalar_basis
    velocity, grad = disc.velocity(u)
    transport = _matrix(
        basis, basis, np.einsum("eqa,ejqa,iq,eq->eij", velocity, basis.dphi, basis.phi, basis.dx)
    )
    blocks = [[None, None], [None, None]]
    for b in range(2):
        for a in range(2):
            rotation = 0.5 * (1.0 - xi) * grad[..., a, b] - 0.5 * (1.0 + xi) * grad[..., b, a]
            block = _weighted_mass(basis, rotation)
            blocks[b][a] = block + transport if a == b else block
    return sparse.bmat(blocks, format="csr")


def orientation_coupling_mass(disc: CellDiscretization, phi: np.ndarray) -> sparse.csr_matrix:
    """C(φ)_ij = ∫ φ φ_i·φ_j (diagonal por bloques)."""
    phi_q, _ = disc.scalar_basis.interpolate(phi)
    block = _weighted_mass(disc.scalar_basis, phi_q)
    return _block_diag(block, block)


def orientation_nonlinear(disc: CellDiscretization, d: np.ndarray) -> tuple[np.ndarray, sparse.csr_matrix]:
    """f_of = ∫ |d|² d·φ_i y su jacobiana ∫ 2(d·φ_j)(d·φ_i) + |d|² φ_j·φ_i."""
    basis = disc.scalar_basis
    values, _ = disc.director(d)
    norm2 = np.sum(values**2, axis=-1)
    f = np.concatenate([load_vector(basis, norm2 * values[..., c]) for c in range(2)])
    blocks = [
        [_weighted_mass(basis, 2.0 * values[..., a] * values[..., b] + (norm2 if a == b else 0.0)) for a in range(2)]
        for b in range(2)
    ]
    return f, sparse.bmat(blocks, format="csr")


def assemble_ofield_operators(
    disc: CellDiscretization, u: np.ndarray, phi: np.ndarray, d: np.ndarray, xi: float
) -> OrientationOperators:
    f_of, jac = orientation_nonlinear(disc, d)
    return OrientationOperators(
        mass=_block_diag(disc.mass, disc.mass),
        stiffness=_block_diag(disc.stiffness, disc.stiffness),
        convection=orientation_convection(disc, u, xi),
        coupling_mass=orientation_coupling_mass(disc, phi),
        nonlinear=f_of,
        nonlinear_jacobian=jac,
    )


# --- Stokes ---


def stokes_rhs(
    disc: CellDiscretization,
    phi: np.ndarray,
    phinat: np.ndarray,
    d: np.ndarray,
    dnat: np.ndarray,
    fa: float,
    xi: float,
) -> np.ndarray:
    """
    a_i = ∫ (φ♮∇φ + (∇d)ᵀd♮)·ψ_i − ∫ (σ_active + σ_dist) : ∇ψ_i

    σ_active = (1/Fa)·½(φ+1) d⊗d, σ_dist = ½(d♮⊗d − d⊗d♮) + ξ/2 (d♮⊗d + d⊗d♮).
    """
    pbasis, ubasis = disc.scalar_basis, disc.velocity_basis
    phi_q, grad_phi = pbasis.interpolate(phi)
    phinat_q, _ = pbasis.interpolate(phinat)
    d_q, grad_d = disc.director(d)
    dnat_q, _ = disc.director(dnat)

    force = phinat_q[..., None] * grad_phi + np.einsum("eqac,eqa->eqc", grad_d, dnat_q)
    d_d = np.einsum("eqa,eqb->eqab", d_q, d_q)
    dnat_d = np.einsum("eqa,eqb->eqab", dnat_q, d_q)
    d_dnat = np.swapaxes(dnat_d, -1, -2)
    stress = (
        (0.5 * (phi_q + 1.0) / fa)[..., None, None] * d_d
        + 0.5 * (dnat_d - d_dnat)
        + 0.5 * xi * (dnat_d + d_dnat)
    )
    parts = []
    for c in range(2):
        local = np.einsum("eq,iq,eq->ei", force[..., c], ubasis.phi, ubasis.dx) - np.einsum(
            "eqb,eiqb,eq->ei", stress[..., c, :], ubasis.dphi, ubasis.dx
        )
        parts.append(_vector(ubasis, local))
    return np.concatenate(parts)


def assemble_stokes(
    disc: CellDiscretization,
    phi: np.ndarray,
    phinat: np.ndarray,
    d: np.ndarray,
    dnat: np.ndarray,
    fa: float,
    xi: float,
) -> tuple[sparse.csr_matrix, sparse.csr_matrix, np.ndarray]:
    return disc.velocity_laplacian, disc.divergence, stokes_rhs(disc, phi, phinat, d, dnat, fa, xi)
