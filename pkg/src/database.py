# Configuración de base de datos usando SQLAlchemy.
#
# - Por defecto: SQLite local (cellmor.db), suficiente para el registro de corridas.
# - Con DATABASE_URL configurada (p. ej. PostgreSQL de Railway) se usa esa URL.

import logging
import os
from pathlib import Path

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

# .env en la raíz del repositorio (sólo en desarrollo local)
backend_dir = Path(__file__).parent.parent
load_dotenv(dotenv_path=backend_dir / ".env")

DEFAULT_DATABASE_URL = "sqlite:///./cellmor.db"


def database_url() -> str:
    return os.getenv("DATABASE_URL", "").strip() or DEFAULT_DATABASE_URL


def make_engine(url: str):
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


DATABASE_URL = database_url()
IS_POSTGRES = not DATABASE_URL.startswith("sqlite")
logger.info(f"[DB] Usando {'PostgreSQL externa' if IS_POSTGRES else 'SQLite local'}")

engine = make_engine(DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def create_tables(bind=None) -> None:
    """Crea las tablas registradas si no existen."""
    from . import models  # noqa: F401

    Base.metadata.create_all(bind=bind or engine)


def get_db():
    """
    Dependencia para inyectar la sesión de DB en los endpoints de FastAPI.
    """
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
