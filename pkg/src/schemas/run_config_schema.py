"""
Configuración de corrida (archivo JSON de --config o cuerpo de POST /api/experiments/{command}).

Las claves desconocidas se rechazan en todos los niveles.
"""
import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from .model_parameters_schema import ModelParameters

Stage = Literal["pfield", "ofield", "stokes"]
Command = Literal["simulate", "benchmark-solvers", "build-rb", "evaluate-rom"]

_STRICT = {"extra": "forbid"}
_SQRT10 = math.sqrt(10.0)


class MeshSpec(BaseModel):
    model_config = _STRICT

    nx: int = Field(40, ge=1, description="Celdas en x")
    ny: int = Field(40, ge=1, description="Celdas en y")
    cell_kind: Literal["simplicial", "rectangular"] = "simplicial"
    bounds: Optional[tuple[float, float, float, float]] = Field(
        None, description="(x0, x1, y0, y1); por defecto el dominio del escenario"
    )


class ScenarioSpec(BaseModel):
    model_config = _STRICT

    name: Literal["circle", "isolation", "custom"] = "circle"
    domain: Optional[tuple[float, float, float, float]] = None
    polygon: Optional[list[tuple[float, float]]] = None
    center: Optional[tuple[float, float]] = None
    radius: Optional[float] = Field(None, gt=0)
    orientation: Optional[tuple[float, float]] = None

    @field_validator("polygon")
    @classmethod
    def _drop_repeated_vertices(cls, polygon):
        """Quita vértices consecutivos repetidos, incluido el cierre explícito (último == primero)."""
        if polygon is None:
            return None
        cleaned = [v for i, v in enumerate(polygon) if i == 0 or v != polygon[i - 1]]
        while len(cleaned) > 1 and cleaned[-1] == cleaned[0]:
            cleaned.pop()
        return cleaned

    @model_validator(mode="after")
    def _custom_needs_shape(self):
        if self.name != "custom":
            return self
        if self.domain is None:
            raise ValueError("el escenario custom necesita 'domain'")
        has_circle = self.center is not None and self.radius is not None
        if self.polygon is None and not has_circle:
            raise ValueError("el escenario custom necesita 'polygon' o 'center' + 'radius'")
        if self.polygon is not None and len(self.polygon) < 3:
            raise ValueError("el polígono necesita al menos 3 vértices distintos")
        return self


class SamplingSpec(BaseModel):
    model_config = _STRICT

    ca_range: tuple[float, float] = (1.0 / _SQRT10, _SQRT10)
    pa_range: tuple[float, float] = (1.0 / _SQRT10, _SQRT10)
    n_train_per_axis: int = Field(4, ge=1)
    n_validation: int = Field(4, ge=0)

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("ca_range", "pa_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} debe cumplir 0 < min <= max")
        return self


class SolverSettings(BaseModel):
    model_config = _STRICT

    pfield: Literal["gmres-ilu", "direct"] = "gmres-ilu"
    ofield: Literal["schur-gmres", "gmres", "direct"] = "schur-gmres"
    stokes: Literal["schur-cg", "direct"] = "schur-cg"
    newton_atol: float = Field(1e-10, gt=0)
    newton_rtol: float = Field(1e-12, ge=0)
    newton_max_iter: int = Field(20, ge=1)
    gmres_rtol: float = Field(1e-10, gt=0)
    gmres_restart: int = Field(100, ge=1)
    gmres_max_restarts: int = Field(10, ge=1)
    cg_rtol: float = Field(1e-10, gt=0)
    ilu_fill_factor: float = Field(80, gt=0)
    ilu_drop_tol: float = Field(1e-6, ge=0)


class MorSettings(BaseModel):
    model_config = _STRICT

    pod_tolerances: list[float] = Field(default_factory=lambda: [1e-4])
    deim_tolerances: list[float] = Field(default_factory=lambda: [1e-8])
    omega: float = Field(0.95, ge=0, le=1)
    chunk_size: int = Field(10, ge=1)
    inner_product: Literal["mass", "identity"] = "mass"
    reduced_fields: list[Stage] = Field(default_factory=lambda: ["pfield", "ofield", "stokes"])
    single_field: bool = Field(False, description="Reducir un campo por vez")
    use_deim: bool = True
    compare_without_deim: bool = True
    gauss_newton_atol: float = Field(1e-10, gt=0)
    gauss_newton_max_iter: int = Field(20, ge=1)
    basis_dir: Optional[str] = Field(None, description="Bases guardadas por build-rb")

    @model_validator(mode="after")
    def _tolerances(self):
        if not self.pod_tolerances:
            raise ValueError("pod_tolerances no puede estar vacío")
        if any(t < 0 for t in self.pod_tolerances + self.deim_tolerances):
            raise ValueError("las tolerancias deben ser >= 0")
        if not self.reduced_fields:
            raise ValueError("reduced_fields no puede estar vacío")
        return self


class CaptureFlags(BaseModel):
    model_config = _STRICT

    residuals: bool = True
    output_stride: int = Field(1, ge=1)
    write_vtk: bool = True


class BenchmarkSettings(BaseModel):
    model_config = _STRICT

    grids: list[int] = Field(default_factory=lambda: [60, 120])
    n_steps: int = Field(50, ge=1)
    stages: list[Stage] = Field(default_factory=lambda: ["pfield", "ofield", "stokes"])


class RunConfig(BaseModel):
    model_config = _STRICT

    scenario: ScenarioSpec = Field(default_factory=ScenarioSpec)
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    order: Literal[1] = 1
    dt: float = Field(1e-3, gt=0)
    t_end: float = Field(0.2, ge=0)
    parameters: ModelParameters = Field(default_factory=ModelParameters)
    sampling: SamplingSpec = Field(default_factory=SamplingSpec)
    solvers: SolverSettings = Field(default_factory=SolverSettings)
    mor: MorSettings = Field(default_factory=MorSettings)
    capture: CaptureFlags = Field(default_factory=CaptureFlags)
    benchmark: BenchmarkSettings = Field(default_factory=BenchmarkSettings)
    output_dir: str = "results"
    seed: int = 0
    n_workers: int = Field(1, ge=1)
    paper_scale: bool = False

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.dt - 1e-9))

    def with_overrides(
        self,
        output_dir: Optional[str] = None,
        n_workers: Optional[int] = None,
        seed: Optional[int] = None,
        paper_scale: Optional[bool] = None,
    ) -> "RunConfig":
        updates = {
            "output_dir": output_dir,
            "n_workers": n_workers,
            "seed": seed,
            "paper_scale": paper_scale or None,
        }
        data = self.model_dump()
        data.update({k: v for k, v in updates.items() if v is not None})
        return RunConfig.model_validate(data)

    def for_command(self, command: Command) -> "RunConfig":
        """Aplica los presets de escala completa si `paper_scale` está activo."""
        if not self.paper_scale:
            return self
        data = self.model_dump()
        if command == "simulate":
            data["mesh"].update(nx=240, ny=240, cell_kind="simplicial")
            data["t_end"] = 5.0
        elif command in ("build-rb", "evaluate-rom"):
            data["mesh"].update(nx=80, ny=80, cell_kind="rectangular")
            data["sampling"].update(n_train_per_axis=8, n_validation=32)
        return RunConfig.model_validate(data)
