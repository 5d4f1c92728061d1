from pydantic import BaseModel, Field, field_validator


class ModelParameters(BaseModel):
    """η = (ε, γ, c₁, κ, ξ, Be, Ca, Pa, Fa); Re queda fijo en 0 (aproximación de Stokes)."""

    model_config = {"frozen": True, "extra": "forbid"}

    epsilon: float = Field(0.5, gt=0, description="Ancho de interfaz ε")
    gamma: float = Field(0.025, gt=0, description="Movilidad γ")
    c1: float = Field(5.0, description="Peso de alineación c₁")
    kappa: float = Field(1.65, gt=0, description="Disipación rotacional κ")
    xi: float = Field(1.1, description="Factor de forma ξ")
    be: float = Field(1.0, description="Número de flexión Be")
    ca: float = Field(1.0, description="Número capilar Ca")
    pa: float = Field(1.0, description="Número de polaridad Pa")
    fa: float = Field(1.0, description="Número activo Fa")
    re: float = Field(0.0, description="Número de Reynolds (sólo 0)")

    @field_validator("be", "ca", "pa", "fa")
    @classmethod
    def _nonzero(cls, value: float) -> float:
        if value == 0:
            raise ValueError("debe ser distinto de cero")
        return value

    @field_validator("re")
    @classmethod
    def _stokes_only(cls, value: float) -> float:
        if value != 0:
            raise ValueError("sólo se soporta Re = 0")
        return value
