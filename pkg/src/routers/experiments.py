import logging
from pathlib import Path

from fastapi import APIRouter, BackgroundTasks, HTTPException, status
from pydantic import ValidationError

from ..config import get_settings
from ..exceptions import CellModelError, ConfigError
from ..schemas.run_config_schema import Command, RunConfig
from ..schemas.run_schema import RUN_STATUS_PENDING, RunLaunched
from ..services import experiment_service
from ..services.run_registry_service import RunRegistry
from ..services.scenarios import scenario_from_spec
from ..utils import run_slug

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["experiments"])


def _run_in_background(command: Command, config: RunConfig, run_id: int | None) -> None:
    """Los errores de dominio ya quedan en el registro; acá sólo se evita que maten al worker."""
    try:
        experiment_service.execute(command, config, RunRegistry(), run_id)
    except CellModelError:
        pass
    except Exception as e:
        logger.error(f"❌ Error inesperado en {command}: {e}", exc_info=True)
        RunRegistry().fail(run_id, f"{type(e).__name__}: {e}")


@router.post("/{command}", response_model=RunLaunched, status_code=status.HTTP_202_ACCEPTED)
def launch_experiment(command: Command, config: RunConfig, background_tasks: BackgroundTasks):
    """
    Lanza un comando de experimento en segundo plano.

    La configuración se valida antes de registrar la corrida: un escenario o preset inválido devuelve 422.
    El estado se consulta luego en `/api/runs/{id}`.
    """
    try:
        config = config.for_command(command)
        scenario_from_spec(config.scenario)
    except (ConfigError, ValidationError) as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    except CellModelError as e:
        raise HTTPException(status_code=500, detail=f"{type(e).__name__}: {e}")

    slug = run_slug(command, config.scenario.name)
    # cada corrida lanzada por la API escribe en su propio subdirectorio
    config = config.with_overrides(output_dir=str(Path(get_settings().output_dir) / slug))
    run_id = RunRegistry().start(command, config, slug)
    background_tasks.add_task(_run_in_background, command, config, run_id)
    logger.info(f"🚀 {command} encolado ({slug}) → {config.output_dir}")
    return RunLaunched(
        id=run_id, slug=slug, command=command, status=RUN_STATUS_PENDING, output_dir=config.output_dir
    )
