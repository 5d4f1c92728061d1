import os

# las pruebas nunca escriben en la base local del proyecto
os.environ.setdefault("DATABASE_URL", "sqlite:///:memory:")

import numpy as np
import pytest

from src.schemas.model_parameters_schema import ModelParameters
from src.services.assembly import CellDiscretization
from src.services.mesh_fespace import build_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def params():
    return ModelParameters()


@pytest.fixture
def unit_disc():
    return CellDiscretization(build_mesh(4, 4, (0.0, 1.0, 0.0, 1.0)))


@pytest.fixture
def small_disc():
    return CellDiscretization(build_mesh(8, 8, (0.0, 8.0, 0.0, 8.0)))


@pytest.fixture
def quad_disc():
    return CellDiscretization(build_mesh(4, 4, (0.0, 4.0, 0.0, 4.0), cell_kind="rectangular"))


@pytest.fixture
def tiny_config(tmp_path):
    """Célula de radio 2 en [0,8]², malla 8×8 y tres pasos: escala de segundos."""
    from src.schemas.run_config_schema import RunConfig

    return RunConfig.model_validate(
        {
            "scenario": {"name": "custom", "domain": [0, 8, 0, 8], "center": [4, 4], "radius": 2},
            "mesh": {"nx": 8, "ny": 8},
            "dt": 1e-3,
            "t_end": 3e-3,
            "sampling": {"n_train_per_axis": 2, "n_validation": 2},
            "mor": {"pod_tolerances": [1e-3], "deim_tolerances": [1e-6], "chunk_size": 2},
            "benchmark": {"grids": [8], "n_steps": 2, "stages": ["stokes"]},
            "output_dir": str(tmp_path / "out"),
        }
    )


@pytest.fixture
def registry_db(tmp_path, monkeypatch):
    """Registro de corridas sobre un SQLite temporal; devuelve la fábrica de sesiones."""
    from sqlalchemy.orm import sessionmaker

    from src.database import create_tables, make_engine
    from src.services import run_registry_service

    engine = make_engine(f"sqlite:///{tmp_path / 'runs.db'}")
    create_tables(bind=engine)
    factory = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    monkeypatch.setattr(run_registry_service, "SessionLocal", factory)
    yield factory
    engine.dispose()
