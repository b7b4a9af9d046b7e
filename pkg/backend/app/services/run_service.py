"""
In-process registry of experiment runs started through the API.
"""
import asyncio
import uuid
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger

from app.core.config import settings
from app.models.enums import ExperimentMode, RunStatus
from app.models.experiment import ExperimentConfig


@dataclass
class RunRecord:
    run_id: str
    mode: ExperimentMode
    out_dir: str
    status: RunStatus = RunStatus.PENDING
    created_at: datetime = field(default_factory=datetime.utcnow)
    finished_at: Optional[datetime] = None
    summary: Optional[Dict[str, Any]] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "mode": self.mode.value,
            "status": self.status.value,
            "out_dir": self.out_dir,
            "created_at": self.created_at.isoformat(),
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
            "error": self.error,
            "summary": self.summary if self.status == RunStatus.COMPLETED else None,
        }


class RunService:
    """Starts experiments on worker threads and tracks their status."""

    def __init__(self, output_root: Optional[str] = None):
        """Initialize run service."""
        self.output_root = Path(output_root or settings.OUTPUT_DIR) / "api"
        self.runs: Dict[str, RunRecord] = {}
        self._semaphore: Optional[asyncio.Semaphore] = None
        logger.info(f"Run service initialized with output root: {self.output_root}")

    def get(self, run_id: str) -> Optional[RunRecord]:
        return self.runs.get(run_id)

    def list_runs(self) -> List[RunRecord]:
        return sorted(self.runs.values(), key=lambda r: r.created_at)

    def submit(self, mode: ExperimentMode, config: ExperimentConfig) -> RunRecord:
        """Register a run and schedule it on the running event loop."""
        run_id = uuid.uuid4().hex[:12]
        out_dir = self.output_root / run_id
        config = config.model_copy(update={"mode": mode, "out_dir": str(out_dir)})
        record = RunRecord(run_id=run_id, mode=mode, out_dir=str(out_dir))
        self.runs[run_id] = record
        asyncio.create_task(self._execute(record, config))
        logger.info(f"Run {run_id} ({mode.value}) submitted")
        return record

    async def _execute(self, record: RunRecord, config: ExperimentConfig):
        from app.workers.tasks import run_experiment

        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(settings.MAX_CONCURRENT_TASKS)
        async with self._semaphore:
            record.status = RunStatus.RUNNING
            try:
                record.summary = await asyncio.to_thread(run_experiment, config)
                record.status = RunStatus.COMPLETED
                logger.info(f"Run {record.run_id} completed")
            except Exception as e:
                record.status = RunStatus.FAILED
                record.error = str(e)
                logger.error(f"Run {record.run_id} failed: {e}")
            finally:
                record.finished_at = datetime.utcnow()


run_service = RunService()
