"""
Línea de comandos de los experimentos.

    cellmor simulate --config run.json --out results/sim
    cellmor build-rb --workers 4 --paper-scale

Código de salida 0 si el comando termina; si no, un JSON `{"error", "message"}` en stderr y código
2 (configuración) o 1 (fallo numérico).
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from .config import get_settings
from .exceptions import CellModelError, ConfigError
from .schemas.run_config_schema import RunConfig
from .services import experiment_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellmor",
        description="Modelo de célula por elementos finitos y reducción de orden (POD/HAPOD/DEIM)",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, help_text in (
        ("simulate", "integra el modelo completo y escribe diagnósticos y VTK"),
        ("benchmark-solvers", "compara solvers lineales por etapa y grilla"),
        ("build-rb", "entrena bases reducidas (POD/HAPOD) y colaterales DEIM"),
        ("evaluate-rom", "errores del modelo reducido sobre parámetros de validación"),
    ):
        sub = subparsers.add_parser(command, help=help_text)
        sub.add_argument("--config", type=Path, default=None, help="archivo JSON con un RunConfig")
        sub.add_argument("--out", default=None, help="directorio de salida")
        sub.add_argument("--workers", type=int, default=None, help="procesos para barridos de parámetros")
        sub.add_argument("--seed", type=int, default=None, help="semilla de los parámetros de validación")
        sub.add_argument(
            "--paper-scale", action="store_true", help="presets de escala completa (mallas y muestreos grandes)"
        )
    return parser


def load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"No se pudo leer {path}: {e}") from e
    return RunConfig.model_validate_json(text)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    settings = get_settings()
    config = load_config(args.config)
    workers = args.workers
    if workers is None and settings.workers != 1:
        workers = settings.workers
    return config.with_overrides(
        output_dir=args.out, n_workers=workers, seed=args.seed, paper_scale=args.paper_scale
    )


def _report_error(error: str, message: str) -> None:
    print(json.dumps({"error": error, "message": message}, ensure_ascii=False), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, get_settings().log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        config = resolve_config(args)
        summary = experiment_service.execute(args.command, config)
    except (ConfigError, ValidationError) as e:
        _report_error(type(e).__name__, str(e))
        return EXIT_CONFIG
    except CellModelError as e:
        _report_error(type(e).__name__, str(e))
        return EXIT_NUMERICAL

    if experiment_service.failed(summary):
        _report_error("StageError", str(summary["error"]))
        return EXIT_NUMERICAL
    print(json.dumps({"command": args.command, "output_dir": config.output_dir, "files": summary.get("files", [])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
