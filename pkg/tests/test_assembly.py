import numpy as np
import pytest
from scipy import sparse

from src.exceptions import AssemblyError, MeshError
from src.services.assembly import (
    CellDiscretization,
    ElementBasis,
    assemble_convection_pfield,
    assemble_mass,
    assemble_ofield_operators,
    assemble_pfield_jacobian_blocks,
    assemble_pfield_nonlinears,
    assemble_stiffness,
    assemble_stokes,
    double_well_vectors,
    load_vector,
    orientation_nonlinear,
)
from src.services.mesh_fespace import build_mesh, make_space, quadrature, reference_basis

DELTA = 1e-6


def _dense_convection(disc, u):
    mesh = disc.mesh
    points, weights = quadrature(mesh.cell_kind, 5)
    phi_ref, dphi_ref = reference_basis(mesh.cell_kind, 1, points)
    psi_ref, _ = reference_basis(mesh.cell_kind, 2, points)
    velocity = disc.velocity_space
    ux, uy = velocity.extend(u[: disc.n_u]), velocity.extend(u[disc.n_u :])
    out = np.zeros((disc.n_p, disc.n_p))
    for e in range(mesh.n_elements):
        jac = mesh.jacobians[e]
        det = abs(np.linalg.det(jac))
        inv_t = np.linalg.inv(jac).T
        dofs = disc.scalar_space.element_dofs[e]
        vdofs = velocity.element_dofs[e]
        for q, w in enumerate(weights):
            grads = dphi_ref[:, q, :] @ inv_t.T
            uq = np.array([ux[vdofs] @ psi_ref[:, q], uy[vdofs] @ psi_ref[:, q]])
            for a, i in enumerate(dofs):
                for b, j in enumerate(dofs):
                    out[i, j] += w * det * (uq @ grads[a]) * phi_ref[b, q]
    return out


def _directional(fun, x, v):
    return (fun(x + DELTA * v) - fun(x - DELTA * v)) / (2 * DELTA)


def test_single_triangle_mass_matches_analytic():
    space = make_space(build_mesh(1, 1), 1)
    mass = assemble_mass(ElementBasis(space, elements=np.array([0]))).toarray()
    local = mass[np.ix_([0, 1, 3], [0, 1, 3])]
    assert np.allclose(local, (0.5 / 12.0) * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]), atol=1e-15)


def test_single_triangle_stiffness_matches_gradient_oracle():
    mesh = build_mesh(1, 1)
    space = make_space(mesh, 1)
    stiffness = assemble_stiffness(ElementBasis(space, elements=np.array([0]))).toarray()
    coords = mesh.vertices[mesh.elements[0]]
    grads = np.linalg.inv(np.column_stack([np.ones(3), coords]))[1:].T
    oracle = 0.5 * grads @ grads.T
    assert np.allclose(stiffness[np.ix_(mesh.elements[0], mesh.elements[0])], oracle, atol=1e-14)
    assert np.allclose(oracle, 0.5 * np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]]))


@pytest.mark.parametrize("cell_kind", ["simplicial", "rectangular"])
def test_mass_sums_to_area(cell_kind):
    disc = CellDiscretization(build_mesh(10, 10, (0, 40, 0, 40), cell_kind=cell_kind))
    assert disc.mass.sum() == pytest.approx(1600.0, rel=1e-12)
    assert disc.lumped_mass.sum() == pytest.approx(1600.0, rel=1e-12)


def test_stiffness_kernel_contains_constants(small_disc):
    stiffness = small_disc.stiffness
    assert np.max(np.abs(stiffness @ np.ones(small_disc.n_p))) <= 1e-12


@pytest.mark.parametrize("fixture", ["small_disc", "quad_disc"])
def test_mass_and_stiffness_exactly_symmetric(fixture, request):
    disc = request.getfixturevalue(fixture)
    for matrix in (disc.mass, disc.stiffness, disc.velocity_laplacian):
        assert abs(matrix - matrix.T).max() == 0.0


def test_mass_is_positive_definite(small_disc):
    assert np.linalg.eigvalsh(small_disc.mass.toarray()).min() > 0
    m_of = sparse.block_diag([small_disc.mass, small_disc.mass]).toarray()
    assert np.linalg.eigvalsh(m_of).min() > 0
    assert np.linalg.eigvalsh(small_disc.velocity_laplacian.toarray()).min() > 0


def test_convection_zero_velocity(unit_disc):
    matrix = assemble_convection_pfield(unit_disc, np.zeros(2 * unit_disc.n_u))
    assert matrix.nnz == 0


@pytest.mark.parametrize("cell_kind", ["simplicial", "rectangular"])
def test_convection_matches_dense_oracle(cell_kind, rng):
    disc = CellDiscretization(build_mesh(2, 2, (0, 1, 0, 2), cell_kind=cell_kind))
    u = rng.normal(size=2 * disc.n_u)
    assembled = assemble_convection_pfield(disc, u).toarray()
    oracle = _dense_convection(disc, u)
    assert np.max(np.abs(assembled - oracle)) <= 1e-12 * np.max(np.abs(oracle))


def test_convection_annihilates_constants_from_the_left(small_disc, rng):
    matrix = assemble_convection_pfield(small_disc, rng.normal(size=2 * small_disc.n_u))
    assert np.max(np.abs(np.ones(small_disc.n_p) @ matrix)) <= 1e-12


def test_convection_rejects_wrong_velocity_length(unit_disc):
    with pytest.raises(AssemblyError):
        assemble_convection_pfield(unit_disc, np.zeros(unit_disc.n_p))


def test_pfield_nonlinears_simple_states(small_disc):
    n = small_disc.n_p
    ones, zeros = np.ones(n), np.zeros(n)
    director = np.concatenate([ones, zeros])
    f, g, a = assemble_pfield_nonlinears(small_disc, ones, np.full(n, 3.0), director)
    assert np.max(np.abs(g)) <= 1e-14
    assert np.allclose(a, small_disc.lumped_mass, rtol=1e-12)
    f0, _ = double_well_vectors(small_disc, zeros, ones)
    assert np.allclose(f0, -small_disc.lumped_mass, rtol=1e-12)


def test_pfield_jacobian_blocks_limits(small_disc):
    n = small_disc.n_p
    d_phi_f, d_mu_f = assemble_pfield_jacobian_blocks(small_disc, np.ones(n), np.zeros(n))
    assert d_phi_f.nnz == 0
    assert abs(d_mu_f - 2.0 * small_disc.mass).max() <= 1e-14
    _, d_mu_f0 = assemble_pfield_jacobian_blocks(small_disc, np.zeros(n), np.zeros(n))
    assert abs(d_mu_f0 + small_disc.mass).max() <= 1e-14


def test_pfield_jacobian_blocks_central_differences(small_disc, rng):
    n = small_disc.n_p
    phi, mu, v = rng.uniform(-1, 1, n), rng.normal(size=n), rng.normal(size=n)
    d_phi_f, d_mu_f = assemble_pfield_jacobian_blocks(small_disc, phi, mu)
    checks = [
        (_directional(lambda p: double_well_vectors(small_disc, p, mu)[0], phi, v), d_phi_f @ v),
        (_directional(lambda m: double_well_vectors(small_disc, phi, m)[0], mu, v), d_mu_f @ v),
        (_directional(lambda p: double_well_vectors(small_disc, p, mu)[1], phi, v), d_mu_f @ v),
    ]
    for finite_difference, exact in checks:
        assert np.linalg.norm(finite_difference - exact) <= 1e-6 * np.linalg.norm(exact)


def test_orientation_jacobian_central_differences(small_disc, rng):
    d, v = rng.uniform(-1, 1, 2 * small_disc.n_p), rng.normal(size=2 * small_disc.n_p)
    _, jac = orientation_nonlinear(small_disc, d)
    finite_difference = _directional(lambda x: orientation_nonlinear(small_disc, x)[0], d, v)
    exact = jac @ v
    assert np.linalg.norm(finite_difference - exact) <= 1e-6 * np.linalg.norm(exact)


def test_orientation_operators_limits(small_disc, rng):
    n = small_disc.n_p
    ops = assemble_ofield_operators(
        small_disc, np.zeros(2 * small_disc.n_u), np.ones(n), rng.normal(size=2 * n), xi=1.1
    )
    assert ops.convection.nnz == 0
    assert abs(ops.coupling_mass - ops.mass).max() <= 1e-14


def test_stokes_rhs_vanishes_for_trivial_state(small_disc, rng):
    n = small_disc.n_p
    _, _, rhs = assemble_stokes(
        small_disc, np.full(n, 0.3), rng.normal(size=n), np.zeros(2 * n), rng.normal(size=2 * n), 1.0, 1.1
    )
    assert np.max(np.abs(rhs)) <= 1e-13


def test_stokes_constant_stress_has_no_load(small_disc):
    n = small_disc.n_p
    director = np.concatenate([np.ones(n), np.zeros(n)])
    _, _, rhs = assemble_stokes(small_disc, np.full(n, 0.5), np.zeros(n), director, np.zeros(2 * n), 1.0, 1.1)
    assert np.max(np.abs(rhs)) <= 1e-12


def test_stokes_active_stress_divergence(small_disc):
    n = small_disc.n_p
    x = small_disc.scalar_space.nodes[:, 0]
    director = np.concatenate([np.ones(n), np.zeros(n)])
    _, _, rhs = assemble_stokes(small_disc, x, np.zeros(n), director, np.zeros(2 * n), 1.0, 1.1)
    basis = small_disc.velocity_basis
    expected = load_vector(basis, np.full_like(basis.dx, 0.5))
    assert np.allclose(rhs[: small_disc.n_u], expected, atol=1e-12)
    assert np.max(np.abs(rhs[small_disc.n_u :])) <= 1e-12


def test_divergence_of_dirichlet_velocity_integrates_to_zero(small_disc):
    column_sums = np.ones(small_disc.n_p) @ small_disc.divergence
    assert np.max(np.abs(column_sums)) <= 1e-12
    assert small_disc.divergence.shape == (small_disc.n_p, 2 * small_disc.n_u)


def test_restricted_discretization_reproduces_full_rows(small_disc):
    dof = 40
    star = small_disc.scalar_space.element_star(dof)
    local = small_disc.restrict(star)
    row = int(np.searchsorted(local.p_global, dof))
    full_row = small_disc.mass[dof].toarray().ravel()[local.p_global]
    assert np.allclose(local.mass[row].toarray().ravel(), full_row, atol=1e-15)


def test_restrict_only_from_full(small_disc):
    local = small_disc.restrict(np.array([0, 1]))
    with pytest.raises(AssemblyError):
        local.restrict(np.array([0]))


def test_only_lowest_taylor_hood_pair():
    with pytest.raises(MeshError):
        CellDiscretization(build_mesh(2, 2), order=2)
