import math

import numpy as np
import pytest

from src.exceptions import ConfigError
from src.schemas.run_config_schema import MeshSpec, ScenarioSpec
from src.services.cell_dynamics import split_ofield, split_pfield, split_stokes
from src.services.scenarios import (
    CIRCLE,
    ISOLATION,
    build_discretization,
    initial_state,
    phase_field_profile,
    scenario_from_spec,
)


def _vertex(disc, x, y):
    return int(np.argmin(np.linalg.norm(disc.mesh.vertices - np.array([x, y]), axis=1)))


def test_circle_profile_is_one_inside_and_minus_one_outside():
    phi = phase_field_profile(CIRCLE, epsilon=0.5)
    assert phi(np.array([15.0]), np.array([15.0]))[0] == pytest.approx(1.0, abs=1e-10)
    assert phi(np.array([1.0]), np.array([1.0]))[0] == pytest.approx(-1.0, abs=1e-10)
    # sobre la membrana el perfil vale cero
    assert phi(np.array([20.0]), np.array([15.0]))[0] == pytest.approx(0.0, abs=1e-12)


def test_profile_width_scales_with_epsilon():
    phi = phase_field_profile(CIRCLE, epsilon=0.5)
    r = 0.3
    expected = math.tanh(r / (math.sqrt(2.0) * 0.5))
    assert phi(np.array([15.0 + 5.0 - r]), np.array([15.0]))[0] == pytest.approx(expected, rel=1e-12)


def test_initial_state_circle():
    scenario = scenario_from_spec(ScenarioSpec())
    disc = build_discretization(MeshSpec(nx=30, ny=30), scenario)
    state = initial_state(disc, scenario, epsilon=0.5)

    phi, phi_nat, mu = split_pfield(state.pfield)
    d, d_nat = split_ofield(state.ofield)
    u, p = split_stokes(state.stokes, disc.n_u)
    assert state.k == 0
    assert np.all(phi_nat == 0) and np.all(mu == 0) and np.all(d_nat == 0)
    assert np.all(u == 0) and np.all(p == 0)

    center = _vertex(disc, 15.0, 15.0)
    corner = _vertex(disc, 0.0, 0.0)
    assert phi[center] == pytest.approx(1.0, abs=1e-10)
    assert phi[corner] == pytest.approx(-1.0, abs=1e-10)

    # d₀ = v·(φ₀+1)/2 con v = (1, 0)
    dx, dy = d.reshape(2, -1)
    assert dx[center] == pytest.approx(1.0, abs=1e-10)
    assert abs(dx[corner]) < 1e-10
    assert np.all(dy == 0)


def test_isolation_scenario_defaults():
    scenario = scenario_from_spec(ScenarioSpec(name="isolation"))
    assert scenario == ISOLATION
    phi = phase_field_profile(scenario, epsilon=0.5)
    assert phi(np.array([20.0]), np.array([18.0]))[0] > 0.99
    assert phi(np.array([2.0]), np.array([2.0]))[0] < -0.99


def test_spec_overrides_domain_and_orientation():
    scenario = scenario_from_spec(ScenarioSpec(domain=(0, 20, 0, 20), orientation=(0.0, 1.0)))
    assert scenario.domain == (0, 20, 0, 20)
    assert scenario.orientation == (0.0, 1.0)
    assert scenario.shape == CIRCLE.shape


def test_custom_polygon_and_circle():
    polygon = scenario_from_spec(
        ScenarioSpec(name="custom", domain=(0, 10, 0, 10), polygon=[(2, 2), (8, 2), (8, 8), (2, 8)])
    )
    assert polygon.name == "custom"
    assert polygon.orientation == (1.0, 0.0)
    circle = scenario_from_spec(ScenarioSpec(name="custom", domain=(0, 10, 0, 10), center=(5, 5), radius=2))
    phi = phase_field_profile(circle, epsilon=0.5)
    assert phi(np.array([5.0]), np.array([5.0]))[0] > 0.99


def test_custom_without_shape_is_config_error():
    spec = ScenarioSpec.model_construct(
        name="custom", domain=(0, 1, 0, 1), polygon=None, center=None, radius=None, orientation=None
    )
    with pytest.raises(ConfigError):
        scenario_from_spec(spec)


def test_mesh_bounds_override_scenario_domain():
    disc = build_discretization(MeshSpec(nx=4, ny=4, bounds=(0, 2, 0, 2)), CIRCLE)
    assert disc.mesh.bounds == (0, 2, 0, 2)
    disc = build_discretization(MeshSpec(nx=4, ny=4), CIRCLE)
    assert tuple(disc.mesh.bounds) == CIRCLE.domain


def test_closed_custom_polygon_gives_finite_initial_state():
    scenario = scenario_from_spec(
        ScenarioSpec(name="custom", domain=(0, 4, 0, 4), polygon=[(1, 1), (3, 1), (3, 3), (1, 3), (1, 1)])
    )
    disc = build_discretization(MeshSpec(nx=8, ny=8), scenario)
    state = initial_state(disc, scenario, epsilon=0.5)
    phi, _, _ = split_pfield(state.pfield)
    assert np.all(np.isfinite(phi))
    assert phi[_vertex(disc, 2.0, 2.0)] > 0
    assert phi[_vertex(disc, 0.0, 0.0)] < 0
