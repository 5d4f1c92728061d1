from datetime import datetime
from typing import Any, Optional

from pydantic import BaseModel

# Estados de una corrida registrada
RUN_STATUS_PENDING = "PENDING"
RUN_STATUS_RUNNING = "RUNNING"
RUN_STATUS_FINISHED = "FINISHED"
RUN_STATUS_FAILED = "FAILED"


class RunOut(BaseModel):
    id: int
    slug: str
    command: str
    status: str
    output_dir: Optional[str] = None
    error_message: Optional[str] = None
    created_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None

    model_config = {"from_attributes": True}


class RunDetailOut(RunOut):
    config: Optional[dict[str, Any]] = None
    summary: Optional[dict[str, Any]] = None


class RunLaunched(BaseModel):
    id: Optional[int] = None
    slug: str
    command: str
    status: str
    output_dir: str
