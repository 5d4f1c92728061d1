import numpy as np
import pytest

from src.exceptions import MeshError
from src.services.assembly import ElementBasis
from src.services.mesh_fespace import (
    Circle,
    CoefficientVector,
    Polygon,
    build_mesh,
    interpolate,
    make_space,
    signed_distance,
)

ISOLATION = Polygon(((10, 18), (13, 13), (19, 13), (28.5, 16), (25, 23.5), (15, 23)))


def _ray_cast(vertices, x, y):
    inside = False
    n = len(vertices)
    for i in range(n):
        (ax, ay), (bx, by) = vertices[i], vertices[(i + 1) % n]
        if (ay > y) != (by > y) and x < ax + (y - ay) * (bx - ax) / (by - ay):
            inside = not inside
    return inside


def test_smallest_simplicial_mesh():
    mesh = build_mesh(1, 1)
    assert mesh.n_elements == 2
    assert mesh.n_vertices == 4
    assert mesh.n_edges == 5


def test_rectangular_mesh_counts():
    mesh = build_mesh(80, 80, (0, 40, 0, 40), cell_kind="rectangular")
    assert mesh.n_elements == 6400
    assert mesh.n_vertices == 6561


def test_large_simplicial_mesh_counts():
    mesh = build_mesh(240, 240, (0, 40, 0, 40))
    assert mesh.n_elements == 115200


@pytest.mark.parametrize("cell_kind", ["simplicial", "rectangular"])
def test_edges_shared_and_boundary_marked(cell_kind):
    mesh = build_mesh(3, 5, (0, 3, 0, 5), cell_kind=cell_kind)
    counts = mesh.edge_element_counts
    assert set(np.unique(counts)) == {1, 2}
    assert np.array_equal(np.flatnonzero(counts == 1), mesh.boundary_edges)
    assert mesh.boundary_edges.size == 2 * (3 + 5)
    assert np.all(mesh.boundary_markers >= 0)


@pytest.mark.parametrize("nx, ny", [(0, 1), (2, 0)])
def test_zero_cells_rejected(nx, ny):
    with pytest.raises(MeshError):
        build_mesh(nx, ny)


def test_degenerate_bounds_rejected():
    with pytest.raises(MeshError):
        build_mesh(2, 2, (0, 0, 0, 1))


def test_numbering_is_deterministic():
    a = make_space(build_mesh(5, 3, (0, 2, 0, 1)), 2, dirichlet=True)
    b = make_space(build_mesh(5, 3, (0, 2, 0, 1)), 2, dirichlet=True)
    assert np.array_equal(a.element_dofs, b.element_dofs)
    assert np.array_equal(a.free_dofs, b.free_dofs)


def test_space_dof_counts():
    mesh = build_mesh(1, 1)
    assert make_space(mesh, 1).dof_count == 4
    assert make_space(mesh, 2).dof_count == 9
    assert make_space(mesh, 1, dirichlet=True).dof_count == 0
    assert make_space(build_mesh(1, 1, cell_kind="rectangular"), 2).dof_count == 9


@pytest.mark.parametrize("cell_kind", ["simplicial", "rectangular"])
@pytest.mark.parametrize("order", [1, 2])
def test_dirichlet_removes_boundary_dofs(cell_kind, order):
    mesh = build_mesh(4, 3, cell_kind=cell_kind)
    full = make_space(mesh, order)
    constrained = make_space(mesh, order, dirichlet=True)
    assert constrained.dof_count == full.dof_count - full.boundary_dofs.size
    if order == 1:
        assert full.dof_count == mesh.n_vertices


def test_unsupported_order():
    with pytest.raises(MeshError):
        make_space(build_mesh(1, 1), 3)


def test_interpolate_constant_and_linear():
    space = make_space(build_mesh(3, 3, (0, 3, 0, 3)), 1)
    assert np.all(interpolate(space, lambda x, y: 1.0).values == 1.0)
    coeffs = interpolate(space, lambda x, y: x).values
    assert np.allclose(coeffs, space.nodes[:, 0], atol=0)


@pytest.mark.parametrize("cell_kind", ["simplicial", "rectangular"])
def test_order_two_reproduces_quadratics(cell_kind):
    space = make_space(build_mesh(3, 2, (0, 1.5, -1, 1), cell_kind=cell_kind), 2)
    basis = ElementBasis(space)
    x, y = basis.points[..., 0], basis.points[..., 1]
    for f in (lambda x, y: x, lambda x, y: y, lambda x, y: x * y):
        values, _ = basis.interpolate(interpolate(space, f).values)
        assert np.max(np.abs(values - f(x, y))) <= 1e-12


def test_vector_interpolation_is_component_major():
    space = make_space(build_mesh(2, 2), 1).vector(2)
    vec = interpolate(space, lambda x, y: (x, 2.0 + y))
    assert vec.values.size == 2 * 9
    assert np.allclose(vec.component(0), space.nodes[:, 0])
    assert np.allclose(vec.component(1), 2.0 + space.nodes[:, 1])


def test_coefficient_vector_length_checked():
    space = make_space(build_mesh(2, 2), 1)
    with pytest.raises(MeshError):
        CoefficientVector(space, np.zeros(4))


def test_circle_signed_distance():
    circle = Circle((15.0, 15.0), 5.0)
    assert signed_distance(circle, np.array([15.0, 15.0])) == pytest.approx(5.0)
    assert signed_distance(circle, np.array([20.0, 15.0])) == pytest.approx(0.0, abs=1e-14)
    assert signed_distance(circle, np.array([26.0, 15.0])) == pytest.approx(-6.0)


def test_polygon_signed_distance():
    assert signed_distance(ISOLATION, np.array([10.0, 18.0])) == pytest.approx(0.0, abs=1e-14)
    centroid = np.mean(np.asarray(ISOLATION.vertices), axis=0)
    assert signed_distance(ISOLATION, centroid) > 0


def test_polygon_sign_matches_ray_casting(rng):
    points = rng.uniform(0, 40, size=(1000, 2))
    dist = signed_distance(ISOLATION, points)
    inside = np.array([_ray_cast(ISOLATION.vertices, x, y) for x, y in points])
    assert np.array_equal(dist > 0, inside)


def test_degenerate_polygon():
    with pytest.raises(MeshError):
        signed_distance(Polygon(((0, 0), (1, 1))), np.array([0.5, 0.5]))


def test_closed_polygon_with_repeated_vertex():
    square = Polygon(((1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0)))
    closed = Polygon(square.vertices + ((1.0, 1.0),))
    points = np.array([[2.0, 2.0], [0.5, 0.5], [3.0, 2.0]])
    dist = signed_distance(closed, points)
    assert np.all(np.isfinite(dist))
    assert np.allclose(dist, signed_distance(square, points))
    assert dist[0] == pytest.approx(1.0)
    assert dist[1] == pytest.approx(-np.sqrt(0.5))
