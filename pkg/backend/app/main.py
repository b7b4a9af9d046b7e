"""
HTTP surface of the workbench: experiment submission, run status and report artifacts.

Serve with ``uvicorn app.main:app``.
"""
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from loguru import logger

from app.api.v1 import api_router
from app.core.config import settings
from app.core.exceptions import WorkbenchError
from app.core.logging_config import configure_logging
from app.engines.track.track_loader import TrackLoader
from app.models.enums import RunStatus
from app.services.run_service import run_service


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging()
    tracks = TrackLoader().get_all_tracks()
    app.state.tracks = tracks
    if not tracks:
        logger.warning(f"No track files under {settings.TRACKS_PATH}")
    logger.info(f"{settings.APP_NAME} v{settings.APP_VERSION} ({settings.ENVIRONMENT}): tracks {', '.join(tracks) or '-'}")

    yield

    active = [r.run_id for r in run_service.list_runs() if r.status in (RunStatus.PENDING, RunStatus.RUNNING)]
    if active:
        logger.warning(f"Shutting down with {len(active)} unfinished runs: {', '.join(active)}")
    else:
        logger.info("Shutting down")


async def workbench_error_handler(request: Request, exc: WorkbenchError) -> JSONResponse:
    """Engine errors raised inside a request become 422 with the error type."""
    logger.error(f"{request.method} {request.url.path}: {type(exc).__name__}: {exc}")
    return JSONResponse(status_code=422, content={"error": type(exc).__name__, "detail": str(exc)})


def health(request: Request) -> dict:
    """Service status, available tracks, active runs and whether a policy checkpoint exists."""
    runs = run_service.list_runs()
    return {
        "status": "healthy",
        "app_name": settings.APP_NAME,
        "version": settings.APP_VERSION,
        "tracks": getattr(request.app.state, "tracks", []),
        "active_runs": sum(1 for r in runs if r.status in (RunStatus.PENDING, RunStatus.RUNNING)),
        "finished_runs": sum(1 for r in runs if r.status in (RunStatus.COMPLETED, RunStatus.FAILED)),
        "checkpoint": (Path(settings.CHECKPOINT_DIR) / "policy.pt").exists(),
    }


def create_app() -> FastAPI:
    app = FastAPI(
        title=settings.APP_NAME,
        version=settings.APP_VERSION,
        description="RL-scheduled stochastic NMPC experiments: training, static-vs-adaptive evaluation, stress tests and reports",
        lifespan=lifespan,
    )
    app.add_middleware(
        CORSMiddleware,
        allow_origins=settings.BACKEND_CORS_ORIGINS,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.add_exception_handler(WorkbenchError, workbench_error_handler)
    app.add_api_route("/health", health, methods=["GET"], tags=["Health"])
    app.include_router(api_router, prefix=settings.API_V1_PREFIX)
    return app


app = create_app()
