"""
Experiment API endpoints.
"""
from typing import Optional

from fastapi import APIRouter, Body, HTTPException
from loguru import logger

from app.models.enums import ExperimentMode
from app.models.experiment import ExperimentConfig
from app.services.run_service import run_service

router = APIRouter()


@router.post("/{mode}")
async def start_experiment(mode: str, config: Optional[ExperimentConfig] = Body(default=None)):
    """
    Start an experiment in the background.

    Args:
        mode: Experiment mode (train, eval, bench, stress)
        config: ExperimentConfig body; defaults when omitted
    """
    valid_modes = [m.value for m in ExperimentMode]
    if mode not in valid_modes:
        raise HTTPException(
            status_code=400,
            detail=f"Invalid mode. Valid options: {', '.join(valid_modes)}"
        )

    record = run_service.submit(ExperimentMode(mode), config or ExperimentConfig())
    logger.info(f"Experiment {record.run_id} started in mode {mode}")

    return {
        "run_id": record.run_id,
        "mode": mode,
        "status": record.status.value,
        "message": "Experiment started"
    }


@router.get("/")
async def list_experiments():
    """List all runs started through the API."""
    return [r.to_dict() for r in run_service.list_runs()]


@router.get("/{run_id}")
async def get_experiment(run_id: str):
    """Status of a run and, once completed, its metrics summary."""
    record = run_service.get(run_id)
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    return record.to_dict()
