import os


class Settings:
    """Configuración del proceso que lee variables de entorno dinámicamente."""

    @property
    def app_name(self) -> str:
        return "cellmor"

    @property
    def environment(self) -> str:
        # Railway define PORT; ENV=production también cuenta como producción
        env = os.getenv("ENV", "").lower()
        if env == "production" or os.getenv("PORT"):
            return "production"
        return "development"

    @property
    def cors_origin(self) -> str:
        return os.getenv("CORS_ORIGIN", "http://localhost:3000")

    @property
    def output_dir(self) -> str:
        return os.getenv("CELLMOR_OUTPUT_DIR", "results")

    @property
    def workers(self) -> int:
        return _int_env("CELLMOR_WORKERS", 1)

    @property
    def max_workers(self) -> int:
        """Cota del pool de procesos para barridos de parámetros."""
        return max(1, _int_env("CELLMOR_MAX_WORKERS", 4))

    @property
    def log_level(self) -> str:
        return os.getenv("LOG_LEVEL", "INFO").upper()


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        return default


# Instancia singleton de Settings (sin cache, lee valores dinámicamente)
_settings_instance = None


def get_settings() -> Settings:
    """Retorna la instancia de Settings. Lee variables de entorno dinámicamente."""
    global _settings_instance
    if _settings_instance is None:
        _settings_instance = Settings()
    return _settings_instance


def clear_settings_cache():
    global _settings_instance
    _settings_instance = None
