"""
Escenarios de célula: dominio, membrana inicial (círculo o polígono) y orientación inicial.

φ₀ = tanh(r/(√2 ε)) con r la distancia con signo a la membrana, d₀ = v·(φ₀+1)/2 y u₀ = 0.
φ♮, μ, d♮ y p arrancan en cero.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..exceptions import ConfigError
from ..schemas.run_config_schema import MeshSpec, ScenarioSpec
from .assembly import CellDiscretization
from .cell_dynamics import State
from .mesh_fespace import Bounds, Circle, CoefficientVector, Polygon, Shape, build_mesh, interpolate, signed_distance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    name: str
    domain: Bounds
    shape: Shape
    orientation: tuple[float, float]


CIRCLE = Scenario("circle", (0.0, 30.0, 0.0, 30.0), Circle((15.0, 15.0), 5.0), (1.0, 0.0))
ISOLATION = Scenario(
    "isolation",
    (0.0, 40.0, 0.0, 40.0),
    Polygon(((10.0, 18.0), (13.0, 13.0), (19.0, 13.0), (28.5, 16.0), (25.0, 23.5), (15.0, 23.0))),
    (0.99, 0.14),
)


def scenario_from_spec(spec: ScenarioSpec) -> Scenario:
    if spec.name == "circle":
        base = CIRCLE
    elif spec.name == "isolation":
        base = ISOLATION
    else:
        if spec.polygon is not None:
            shape: Shape = Polygon(tuple(tuple(v) for v in spec.polygon))
        elif spec.center is not None and spec.radius is not None:
            shape = Circle(tuple(spec.center), spec.radius)
        else:
            raise ConfigError("El escenario custom necesita un polígono o un círculo")
        if spec.domain is None:
            raise ConfigError("El escenario custom necesita 'domain'")
        return Scenario("custom", tuple(spec.domain), shape, tuple(spec.orientation or (1.0, 0.0)))
    return Scenario(
        base.name,
        tuple(spec.domain) if spec.domain is not None else base.domain,
        base.shape,
        tuple(spec.orientation) if spec.orientation is not None else base.orientation,
    )


def build_discretization(
    mesh: MeshSpec, scenario: Scenario, order: int = 1, bounds: Optional[Bounds] = None
) -> CellDiscretization:
    domain = bounds or (tuple(mesh.bounds) if mesh.bounds is not None else scenario.domain)
    return CellDiscretization(build_mesh(mesh.nx, mesh.ny, domain, mesh.cell_kind), order)


def phase_field_profile(scenario: Scenario, epsilon: float):
    """Devuelve f(x, y) = tanh(r/(√2 ε))."""
    width = math.sqrt(2.0) * epsilon

    def _phi(x, y):
        r = signed_distance(scenario.shape, np.column_stack([np.ravel(x), np.ravel(y)]))
        return np.tanh(np.asarray(r) / width).reshape(np.shape(x))

    return _phi


@dataclass(frozen=True)
class InitialFields:
    phi: CoefficientVector
    d: CoefficientVector
    u: CoefficientVector


def initial_fields(disc: CellDiscretization, scenario: Scenario, epsilon: float) -> InitialFields:
    phi_fn = phase_field_profile(scenario, epsilon)
    vx, vy = scenario.orientation

    def _director(x, y):
        weight = 0.5 * (phi_fn(x, y) + 1.0)
        return vx * weight, vy * weight

    return InitialFields(
        phi=interpolate(disc.scalar_space, phi_fn),
        d=interpolate(disc.scalar_space.vector(2), _director),
        u=interpolate(disc.velocity_space.vector(2), lambda x, y: (0.0, 0.0)),
    )


def initial_state(disc: CellDiscretization, scenario: Scenario, epsilon: float) -> State:
    fields = initial_fields(disc, scenario, epsilon)
    zeros_p = np.zeros(disc.n_p)
    return State(
        pfield=np.concatenate([fields.phi.values, zeros_p, zeros_p]),
        ofield=np.concatenate([fields.d.values, np.zeros(2 * disc.n_p)]),
        stokes=np.concatenate([fields.u.values, zeros_p]),
        k=0,
    )


def scenario_circle(disc: CellDiscretization, epsilon: float) -> InitialFields:
    return initial_fields(disc, CIRCLE, epsilon)


def scenario_isolation(disc: CellDiscretization, epsilon: float) -> InitialFields:
    return initial_fields(disc, ISOLATION, epsilon)
