import re
import secrets
import unicodedata
from datetime import datetime


def slugify(text: str) -> str:
    """
    Genera un slug a partir de un texto, normalizando tildes y caracteres especiales.

    Ejemplos:
    - "Aislamiento de célula" -> "aislamiento-de-celula"
    - "build-rb 80×80" -> "build-rb-8080"
    """
    if not text:
        return ""

    slug = text.lower().strip()

    # NFD separa caracteres base de diacríticos
    slug = unicodedata.normalize("NFD", slug)
    slug = "".join(char for char in slug if unicodedata.category(char) != "Mn")

    slug = re.sub(r"\s+", "-", slug)
    slug = re.sub(r"[^a-z0-9\-]+", "", slug)
    slug = re.sub(r"\-+", "-", slug)
    return slug.strip("-")


def run_slug(command: str, label: str = "", now: datetime | None = None) -> str:
    """Identificador legible y único de una corrida: comando, etiqueta, fecha y un sufijo aleatorio."""
    now = now or datetime.utcnow()
    parts = [command, label, now.strftime("%Y%m%d-%H%M%S"), secrets.token_hex(3)]
    return slugify(" ".join(p for p in parts if p))
