import numpy as np
import pytest
from scipy import sparse

from src.exceptions import ConvergenceError, SolverError
from src.services.linalg_solvers import (
    OrientationJacobianSolver,
    PhaseFieldJacobianSolver,
    StokesSolver,
    cg,
    cholesky_factorize,
    gmres,
    ilu_incomplete,
    lu_factorize,
    ofield_schur_factors,
    ofield_schur_solve,
    stokes_schur_solve,
)


def _random_spd(rng, n):
    a = rng.normal(size=(n, n))
    return sparse.csr_matrix(a @ a.T + n * np.eye(n))


def _block_problem(rng, n=4, dt=0.1, kappa=1.65):
    mass = _random_spd(rng, n)
    top_left = sparse.csr_matrix(mass.toarray() + dt * rng.normal(size=(n, n)))
    coupling = sparse.csr_matrix(rng.normal(size=(n, n)))
    jacobian = np.block([[top_left.toarray(), dt / kappa * mass.toarray()], [coupling.toarray(), mass.toarray()]])
    return mass, top_left, coupling, jacobian


def test_factorizations_identity_and_small_system():
    b = np.array([1.0, -2.0, 3.0])
    assert np.allclose(lu_factorize(sparse.identity(3)).solve(b), b)
    assert np.allclose(cholesky_factorize(sparse.identity(3)).solve(b), b)
    m = sparse.csr_matrix([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(cholesky_factorize(m).solve(np.array([3.0, 3.0])), [1.0, 1.0])
    assert np.allclose(lu_factorize(m).solve(np.array([3.0, 3.0])), [1.0, 1.0])


def test_cholesky_against_dense_solve(rng):
    m = _random_spd(rng, 50)
    b = rng.normal(size=50)
    factor = cholesky_factorize(m)
    assert factor.kind == "ldlt"
    x = factor.solve(b)
    assert np.linalg.norm(m @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.allclose(x, np.linalg.solve(m.toarray(), b))


def test_singular_matrix_fails():
    with pytest.raises(SolverError):
        lu_factorize(sparse.csr_matrix([[1.0, 1.0], [1.0, 1.0]]))


def test_cholesky_rejects_indefinite():
    with pytest.raises(SolverError):
        cholesky_factorize(sparse.csr_matrix([[1.0, 0.0], [0.0, -1.0]]))


def test_ilu_diagonal_is_exact_inverse():
    d = np.array([2.0, 4.0, -5.0, 0.5])
    ilu = ilu_incomplete(sparse.diags(d))
    assert np.allclose(ilu.apply(d), np.ones(4), atol=1e-14)


def test_ilu_tridiagonal_is_exact():
    n = 30
    m = sparse.diags([-1.0, 2.5, -1.0], [-1, 0, 1], shape=(n, n))
    b = np.arange(1.0, n + 1)
    x = ilu_incomplete(m, fill_factor=80, drop_tol=0.0).apply(b)
    assert np.linalg.norm(m @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_ilu_shifts_zero_diagonal():
    m = sparse.csr_matrix([[0.0, 1.0], [1.0, 0.0]])
    ilu = ilu_incomplete(m)
    assert np.all(np.isfinite(ilu.apply(np.array([1.0, 2.0]))))


def test_gmres_identity_single_iteration():
    result = gmres(sparse.identity(10), np.arange(1.0, 11.0))
    assert result.iterations == 1
    assert np.allclose(result.x, np.arange(1.0, 11.0))


def test_gmres_nonsymmetric_against_dense(rng):
    a = sparse.csr_matrix(rng.normal(size=(30, 30)) + 10 * np.eye(30))
    b = rng.normal(size=30)
    result = gmres(a, b, rtol=1e-10)
    assert np.linalg.norm(a @ result.x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.allclose(result.x, np.linalg.solve(a.toarray(), b), atol=1e-8)


def test_gmres_with_and_without_preconditioner_agree(rng):
    a = sparse.csr_matrix(rng.normal(size=(40, 40)) + 12 * np.eye(40))
    b = rng.normal(size=40)
    plain = gmres(a, b, rtol=1e-10)
    preconditioned = gmres(a, b, rtol=1e-10, precond=ilu_incomplete(a))
    assert preconditioned.iterations <= plain.iterations
    inverse_norm = np.linalg.norm(np.linalg.inv(a.toarray()), 2)
    assert np.linalg.norm(plain.x - preconditioned.x) <= 10 * 1e-10 * np.linalg.norm(b) * inverse_norm


def test_gmres_reports_best_iterate_on_failure(rng):
    a = sparse.csr_matrix(rng.normal(size=(60, 60)))
    b = rng.normal(size=60)
    with pytest.raises(ConvergenceError) as info:
        gmres(a, b, rtol=1e-14, restart=2, max_restarts=2)
    assert info.value.best is not None
    assert info.value.best.shape == (60,)
    assert info.value.iterations > 0


def test_zero_rhs_returns_zero():
    result = gmres(sparse.identity(5), np.zeros(5))
    assert result.iterations == 0
    assert np.all(result.x == 0)


def test_cg_identity_and_spd(rng):
    assert cg(sparse.identity(7), np.ones(7)).iterations == 1
    m = _random_spd(rng, 30)
    b = rng.normal(size=30)
    result = cg(m, b, rtol=1e-10)
    assert np.linalg.norm(m @ result.x - b) <= 1e-10 * np.linalg.norm(b)
    assert np.allclose(result.x, np.linalg.solve(m.toarray(), b), atol=1e-8)


def test_ofield_schur_solve_against_dense(rng):
    mass, top_left, coupling, jacobian = _block_problem(rng, n=6)
    b = rng.normal(size=12)
    result = ofield_schur_solve(mass, top_left, coupling, 0.1, 1.65, b)
    assert np.linalg.norm(jacobian @ result.x - b) <= 1e-9 * np.linalg.norm(b)


def test_ofield_schur_solve_without_time_step(rng):
    mass, _, coupling, _ = _block_problem(rng, n=5)
    b = rng.normal(size=10)
    result = ofield_schur_solve(mass, mass, coupling, 0.0, 1.65, b)
    m = mass.toarray()
    first = np.linalg.solve(m, b[:5])
    second = np.linalg.solve(m, b[5:] - coupling.toarray() @ first)
    assert np.allclose(result.x, np.concatenate([first, second]), atol=1e-10)


def test_ofield_schur_factors_reproduce_jacobian(rng):
    mass, top_left, coupling, jacobian = _block_problem(rng, n=4)
    left, middle, right = ofield_schur_factors(mass, top_left, coupling, 0.1, 1.65)
    assert np.max(np.abs(left @ middle @ right - jacobian)) <= 1e-12 * np.max(np.abs(jacobian))


def test_stokes_schur_zero_rhs(small_disc):
    solution = stokes_schur_solve(
        small_disc.velocity_laplacian, small_disc.divergence, small_disc.mass, np.zeros(2 * small_disc.n_u)
    )
    assert np.all(solution.u == 0)
    assert np.allclose(solution.p, 0)


def test_stokes_schur_residuals_and_zero_mean(small_disc, rng):
    a, b, mp = small_disc.velocity_laplacian, small_disc.divergence, small_disc.mass
    rhs = rng.normal(size=2 * small_disc.n_u)
    solution = stokes_schur_solve(a, b, mp, rhs)
    scale = np.linalg.norm(rhs)
    assert np.linalg.norm(a @ solution.u + b.T @ solution.p - rhs) <= 1e-9 * scale
    assert np.linalg.norm(b @ solution.u) <= 1e-9 * scale
    assert abs(small_disc.lumped_mass @ solution.p) <= 1e-10 * np.linalg.norm(solution.p)


def test_stokes_manufactured_solution():
    from src.services.assembly import CellDiscretization
    from src.services.mesh_fespace import build_mesh

    disc = CellDiscretization(build_mesh(8, 8, (0.0, 1.0, 0.0, 1.0)))
    nodes = disc.velocity_space.nodes[disc.velocity_space.free_dofs]
    x, y = nodes[:, 0], nodes[:, 1]
    # u = curl(x²(1−x)²y²(1−y)²) es de divergencia nula y nula en el borde
    ux = x**2 * (1 - x) ** 2 * (2 * y - 6 * y**2 + 4 * y**3)
    uy = -(y**2) * (1 - y) ** 2 * (2 * x - 6 * x**2 + 4 * x**3)
    exact = np.concatenate([ux, uy])
    # fuerza discreta consistente con la solución interpolada y presión nula
    rhs = disc.velocity_laplacian @ exact
    solution = stokes_schur_solve(disc.velocity_laplacian, disc.divergence, disc.mass, rhs)
    assert np.max(np.abs(solution.u - exact)) <= 0.05 * np.max(np.abs(exact))


def test_stage_solvers_count_factorizations(small_disc, rng):
    n = small_disc.n_p
    block = sparse.bmat(
        [[small_disc.mass, None, None], [None, small_disc.mass, None], [None, None, small_disc.mass]],
        format="csr",
    )
    solver = PhaseFieldJacobianSolver("gmres-ilu", block)
    for _ in range(3):
        x = solver.solve(block, rng.normal(size=3 * n))
        assert x.shape == (3 * n,)
    assert solver.stats.factorizations == 1
    assert solver.stats.n_solves == 3

    direct = PhaseFieldJacobianSolver("direct")
    direct.solve(block, rng.normal(size=3 * n))
    direct.solve(block, rng.normal(size=3 * n))
    assert direct.stats.factorizations == 2

    with pytest.raises(SolverError):
        PhaseFieldJacobianSolver("gmres-ilu")


@pytest.mark.parametrize("kind", ["schur-gmres", "gmres", "direct"])
def test_orientation_solver_variants_agree(kind, rng):
    mass, top_left, coupling, jacobian = _block_problem(rng, n=6)
    b = rng.normal(size=12)
    solver = OrientationJacobianSolver(kind, mass, 0.1, 1.65)
    x = solver.solve(top_left, coupling, b)
    assert np.linalg.norm(jacobian @ x - b) <= 1e-9 * np.linalg.norm(b)


@pytest.mark.parametrize("kind", ["schur-cg", "direct"])
def test_stokes_solver_variants(kind, small_disc, rng):
    a, b, mp = small_disc.velocity_laplacian, small_disc.divergence, small_disc.mass
    solver = StokesSolver(kind, a, b, mp)
    rhs = rng.normal(size=2 * small_disc.n_u)
    solution = solver.solve(rhs)
    reference = stokes_schur_solve(a, b, mp, rhs)
    assert np.allclose(solution.u, reference.u, atol=1e-8 * np.max(np.abs(reference.u)))
    assert np.allclose(solution.p, reference.p, atol=1e-8 * np.max(np.abs(reference.p)))
    assert solver.stats.n_solves == 1
    assert solver.stats.setup_seconds >= 0
