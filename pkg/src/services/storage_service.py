"""
Persistencia de bases y modelos reducidos.

Contenedor de base (`.basis`): magic de 8 bytes, longitud del encabezado (uint32 little-endian),
encabezado JSON (pipeline, n, N, producto interno, tolerancia) y luego los modos en orden columna
(float64 little-endian) seguidos de los N valores singulares.

Modelo reducido (`.npz`): encabezado JSON versionado más bases, bases colaterales, DOFs de
interpolación y elementos de cada vecindario. Al cargar se reconstruye la discretización desde la
especificación de malla guardada y se verifica que los vecindarios coincidan.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..exceptions import ConfigError, DeimError
from ..schemas.run_config_schema import MeshSpec
from .assembly import CellDiscretization
from .mesh_fespace import build_mesh
from .pod_hapod import HapodResult, HapodTraining
from .rom_deim import ReducedModel, build_reduced_model

logger = logging.getLogger(__name__)

BASIS_MAGIC = b"CMBASIS\x00"
BASIS_VERSION = 1
MODEL_VERSION = 1

PathLike = Union[str, Path]


def basis_filename(pipeline: str, tol: float) -> str:
    return f"{pipeline}_tol{tol:.0e}.basis"


def save_basis(
    path: PathLike,
    modes: np.ndarray,
    singular_values: np.ndarray,
    pipeline: str,
    inner_product: str = "mass",
    tolerance: Optional[float] = None,
) -> Path:
    path = Path(path)
    modes = np.asarray(modes, dtype="<f8")
    singular_values = np.asarray(singular_values, dtype="<f8")
    if modes.ndim != 2 or singular_values.shape != (modes.shape[1],):
        raise ConfigError(
            f"Base inconsistente: modos {modes.shape}, valores singulares {singular_values.shape}"
        )
    header = json.dumps(
        {
            "version": BASIS_VERSION,
            "pipeline": pipeline,
            "n": int(modes.shape[0]),
            "N": int(modes.shape[1]),
            "inner_product": inner_product,
            "tolerance": tolerance,
        },
        sort_keys=True,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(modes.tobytes(order="F"))
        f.write(singular_values.tobytes())
    logger.debug(f"[Storage] Base {pipeline} ({modes.shape[0]}×{modes.shape[1]}) en {path}")
    return path


def load_basis(path: PathLike) -> tuple[dict, np.ndarray, np.ndarray]:
    """Devuelve (encabezado, modos, valores singulares)."""
    raw = Path(path).read_bytes()
    if raw[: len(BASIS_MAGIC)] != BASIS_MAGIC:
        raise ConfigError(f"{path} no es un contenedor de base")
    offset = len(BASIS_MAGIC)
    (length,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset : offset + length].decode("utf-8"))
    if header.get("version") != BASIS_VERSION:
        raise ConfigError(f"Versión de base no soportada: {header.get('version')}")
    offset += length
    n, m = header["n"], header["N"]
    expected = offset + 8 * (n * m + m)
    if len(raw) != expected:
        raise ConfigError(f"{path}: tamaño {len(raw)} bytes, se esperaban {expected}")
    modes = np.frombuffer(raw, dtype="<f8", count=n * m, offset=offset).reshape((n, m), order="F")
    values = np.frombuffer(raw, dtype="<f8", count=m, offset=offset + 8 * n * m)
    return header, modes.astype(float), values.astype(float)


def save_training(directory: PathLike, training: HapodTraining, inner_product: str = "mass") -> list[Path]:
    directory = Path(directory)
    paths = []
    for (pipeline, tol), result in sorted(training.bases.items()):
        paths.append(
            save_basis(
                directory / basis_filename(pipeline, tol),
                result.modes, result.singular_values, pipeline, inner_product, tol,
            )
        )
    logger.info(f"[Storage] {len(paths)} bases guardadas en {directory}")
    return paths


def load_training_basis(directory: PathLike, pipeline: str, tol: float) -> HapodResult:
    path = Path(directory) / basis_filename(pipeline, tol)
    if not path.exists():
        raise ConfigError(f"No existe la base {path.name} en {directory}")
    header, modes, values = load_basis(path)
    if header["pipeline"] != pipeline:
        raise ConfigError(f"{path.name} contiene '{header['pipeline']}', se esperaba '{pipeline}'")
    return HapodResult(modes, values, header["N"], header["N"])


# --- Modelo reducido ---


def save_reduced_model(
    path: PathLike,
    rom: ReducedModel,
    mesh: MeshSpec,
    collateral: Optional[dict[str, np.ndarray]] = None,
    inner_product: str = "mass",
) -> Path:
    path = Path(path)
    collateral = collateral or {}
    header = {
        "version": MODEL_VERSION,
        "mesh": mesh.model_dump(mode="json"),
        "bounds": list(rom.disc.mesh.bounds),
        "order": rom.disc.order,
        "inner_product": inner_product,
        "fields": list(rom.reduced_fields),
        "deim": sorted(rom.deim_sizes()),
    }
    payload = {"header": np.array(json.dumps(header, sort_keys=True))}
    for name in rom.reduced_fields:
        payload[f"basis_{name}"] = rom.bases[name]
        interp = rom.interpolants[name]
        if interp is not None:
            payload[f"collateral_{name}"] = collateral.get(name, interp.basis)
            payload[f"dofs_{name}"] = interp.dofs
            payload[f"elements_{name}"] = rom.evaluators[name].disc.elements
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, **payload)
    logger.info(f"[Storage] Modelo reducido guardado en {path} (campos {list(rom.reduced_fields)})")
    return path


def load_reduced_model(path: PathLike) -> tuple[ReducedModel, MeshSpec]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != MODEL_VERSION:
            raise ConfigError(f"Versión de modelo reducido no soportada: {header.get('version')}")
        arrays = {key: np.array(data[key]) for key in data.files if key != "header"}

    mesh = MeshSpec.model_validate(header["mesh"])
    disc = CellDiscretization(build_mesh(mesh.nx, mesh.ny, tuple(header["bounds"]), mesh.cell_kind), header["order"])
    bases = {f: arrays[f"basis_{f}"] for f in header["fields"]}
    collateral = {f: arrays[f"collateral_{f}"] for f in header["deim"]}
    dofs = {f: arrays[f"dofs_{f}"] for f in header["deim"]}
    rom = build_reduced_model(disc, bases, collateral, header["inner_product"], dofs)
    for name in header["deim"]:
        if not np.array_equal(rom.evaluators[name].disc.elements, arrays[f"elements_{name}"]):
            raise DeimError(f"El vecindario guardado de '{name}' no coincide con la malla reconstruida")
    return rom, mesh
