import logging
import os
import time
from pathlib import Path

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response

from .config import clear_settings_cache, get_settings
from .database import IS_POSTGRES, create_tables
from .routers import experiments, runs

# Cargar variables de entorno desde .env (solo en desarrollo local)
backend_dir = Path(__file__).parent.parent
env_path = backend_dir / ".env"
loaded = load_dotenv(dotenv_path=env_path)

# Limpiar cache de settings para asegurar que se recarguen las variables
clear_settings_cache()
app_settings = get_settings()

logging.basicConfig(level=getattr(logging, app_settings.log_level, logging.INFO))
logger = logging.getLogger(__name__)

if loaded:
    logger.info(f"Variables de entorno cargadas desde: {env_path}")
else:
    logger.info(f"Sin archivo .env en {env_path}, se usan variables del entorno")

app = FastAPI(title="cellmor", version="0.1.0", redirect_slashes=False)

# Orígenes permitidos: locales más los de CORS_ORIGIN (separados por coma)
allowed_origins = ["http://localhost:3000", "http://localhost:3001"]
cors_origin_env = os.getenv("CORS_ORIGIN", "")
cors_origin_configured = cors_origin_env and cors_origin_env != "http://localhost:3000"
if cors_origin_configured:
    for origin in (o.strip() for o in cors_origin_env.split(",")):
        if origin and origin not in allowed_origins:
            allowed_origins.append(origin)

if app_settings.environment == "production" and not cors_origin_configured:
    logger.warning("⚠️ CORS_ORIGIN no configurado en producción, permitiendo todos los orígenes")
    allowed_origins = ["*"]

logger.info(f"🌐 Orígenes CORS permitidos: {allowed_origins}")

app.add_middleware(
    CORSMiddleware,
    allow_origins=allowed_origins,
    allow_credentials="*" not in allowed_origins,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Crear tablas al iniciar (no bloquear el inicio si falla: el registro es opcional)
try:
    create_tables()
    logger.info(f"✅ Tablas del registro verificadas ({'PostgreSQL' if IS_POSTGRES else 'SQLite'})")
except Exception as e:
    logger.error(f"❌ Error al crear tablas al iniciar: {str(e)}", exc_info=True)
    logger.warning("⚠️ El servidor continuará iniciando, pero el registro de corridas puede no estar disponible")

app.include_router(experiments.router, prefix="/api")
app.include_router(runs.router, prefix="/api")


@app.get("/", tags=["root"])
async def root():
    return {"message": "cellmor: modelo de célula y reducción de orden"}


@app.get("/api/health", tags=["health"])
async def health():
    return {"status": "ok", "server": "alive", "output_dir": app_settings.output_dir}


@app.get("/api/ping", tags=["health"])
async def ping():
    return {"pong": True, "time": time.time()}


@app.get("/favicon.ico", tags=["static"])
async def favicon():
    return Response(status_code=204)
