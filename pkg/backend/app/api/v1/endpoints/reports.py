"""
Report API endpoints.
"""
from pathlib import Path

from fastapi import APIRouter, HTTPException
from fastapi.responses import FileResponse
from loguru import logger

from app.models.enums import RunStatus
from app.services.report_service import report_service
from app.services.run_service import run_service

router = APIRouter()


def _run_dir(run_id: str) -> Path:
    record = run_service.get(run_id)
    if not record:
        raise HTTPException(status_code=404, detail="Run not found")
    return Path(record.out_dir)


@router.get("/{run_id}")
async def list_artifacts(run_id: str):
    """List the files written by a run."""
    run_dir = _run_dir(run_id)
    if not run_dir.exists():
        return {"run_id": run_id, "artifacts": []}
    artifacts = sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file())
    return {"run_id": run_id, "artifacts": artifacts}


@router.post("/{run_id}/export")
async def export_report(run_id: str):
    """Re-export the report tables of a finished run."""
    run_dir = _run_dir(run_id)
    if run_service.get(run_id).status != RunStatus.COMPLETED:
        raise HTTPException(status_code=400, detail="Run has not completed")
    try:
        runs = report_service.discover_runs(str(run_dir))
        paths = report_service.export_report(runs, str(run_dir / "report"))
    except Exception as e:
        logger.error(f"Report export failed for run {run_id}: {e}")
        raise HTTPException(status_code=500, detail=str(e))
    return {"run_id": run_id, "artifacts": sorted(str(Path(p).relative_to(run_dir)) for p in paths.values())}


@router.get("/{run_id}/{artifact:path}")
async def download_artifact(run_id: str, artifact: str):
    """
    Download one artifact of a run.

    Args:
        run_id: Run ID
        artifact: Path relative to the run directory
    """
    run_dir = _run_dir(run_id).resolve()
    file_path = (run_dir / artifact).resolve()
    if run_dir not in file_path.parents:
        raise HTTPException(status_code=400, detail="Invalid artifact path")
    if not file_path.is_file():
        raise HTTPException(status_code=404, detail="Artifact not found")

    media_type = "application/json" if file_path.suffix in (".json", ".jsonl") else "text/csv"
    return FileResponse(path=str(file_path), media_type=media_type, filename=file_path.name)
