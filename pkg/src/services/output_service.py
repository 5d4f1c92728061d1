"""
Escritura de resultados: series VTK legacy ASCII de los campos, tablas CSV con orden de columnas fijo y
resúmenes JSON. Todas las escrituras de una corrida pasan por un único `RunOutput`.
"""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .assembly import CellDiscretization
from .cell_dynamics import State, split_ofield, split_pfield, split_stokes

logger = logging.getLogger(__name__)

VTK_TRIANGLE = 5
VTK_QUAD = 9


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"No serializable: {type(value).__name__}")


def json_safe(value: Any):
    """NaN/inf no son JSON válido: se escriben como null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


def write_json(path: Union[str, Path], payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(json_safe(payload), indent=2, sort_keys=True, default=_json_default, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def write_csv(path: Union[str, Path], fieldnames: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _json_default(v) if isinstance(v, (np.generic,)) else v for k, v in row.items()})
    return path


# --- VTK ---


def vertex_fields(disc: CellDiscretization, state: State) -> dict[str, np.ndarray]:
    """
    Valores nodales en los vértices de la malla: φ, d y p son P1; la velocidad P2 se extiende con ceros
    en el borde y se toman sus DOFs de vértice, que van primero en la numeración.
    """
    n_v = disc.mesh.n_vertices
    phi, _, _ = split_pfield(state.pfield)
    d, _ = split_ofield(state.ofield)
    u, p = split_stokes(state.stokes, disc.n_u)
    full_u = disc.velocity_space.vector(2).extend(u).reshape(2, -1)[:, :n_v]
    return {
        "phi": phi[:n_v],
        "d": d.reshape(2, -1)[:, :n_v].T,
        "u": full_u.T,
        "p": p[:n_v],
    }


def write_vtk(path: Union[str, Path], disc: CellDiscretization, state: State, time: float = 0.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh = disc.mesh
    fields = vertex_fields(disc, state)
    cell_type = VTK_TRIANGLE if mesh.cell_kind == "simplicial" else VTK_QUAD
    n_local = mesh.elements.shape[1]

    lines = [
        "# vtk DataFile Version 3.0",
        f"cellmor k={state.k} t={time:.6g}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (n_local + 1)}")
    lines += [" ".join([str(n_local)] + [str(int(v)) for v in cell]) for cell in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(cell_type)] * mesh.n_elements
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    for name in ("phi", "p"):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [repr(float(v)) for v in fields[name]]
    for name in ("d", "u"):
        lines.append(f"VECTORS {name} double")
        lines += [f"{float(a)!r} {float(b)!r} 0.0" for a, b in fields[name]]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


class RunOutput:
    """Directorio de una corrida; único escritor de sus archivos."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.directory / name

    def _track(self, path: Path) -> Path:
        self.written.append(path)
        logger.debug(f"[Output] {path}")
        return path

    def json(self, name: str, payload: dict) -> Path:
        return self._track(write_json(self.path(name), payload))

    def csv(self, name: str, fieldnames: Sequence[str], rows: Iterable[dict]) -> Path:
        return self._track(write_csv(self.path(name), fieldnames, rows))

    def vtk(self, disc: CellDiscretization, state: State, dt: float, prefix: str = "state") -> Path:
        return self._track(
            write_vtk(self.path(f"vtk/{prefix}_{state.k:05d}.vtk"), disc, state, state.k * dt)
        )

    def relative(self, paths: Optional[Iterable[Path]] = None) -> list[str]:
        return [str(p.relative_to(self.directory)) for p in (self.written if paths is None else paths)]
