"""
Loguru setup for the workbench.

Every record carries a ``run`` field (``-`` outside an experiment). ``experiment_log``
binds it for the duration of one experiment and mirrors that experiment's records into
``<out_dir>/experiment.log`` next to its run logs, so concurrent API runs stay apart.
"""
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from loguru import logger

from app.core.config import settings

CONSOLE_FORMAT = (
    "<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | <magenta>{extra[run]}</magenta> | "
    "<cyan>{name}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {extra[run]} | {name}:{function}:{line} - {message}"
EXPERIMENT_LOG = "experiment.log"


def configure_logging(level: Optional[str] = None, log_dir: Optional[str] = None) -> str:
    """
    Console sink plus daily workbench and error files under LOG_DIR.

    Returns the effective level.
    """
    level = (level or settings.LOG_LEVEL).upper()
    log_dir = Path(log_dir or settings.LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)

    logger.remove()
    logger.configure(extra={"run": "-"})
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=level, colorize=True)
    logger.add(
        str(log_dir / "workbench_{time:YYYY-MM-DD}.log"),
        rotation="00:00",
        retention="14 days",
        level=level,
        format=FILE_FORMAT,
        enqueue=True,
    )
    logger.add(
        str(log_dir / "errors_{time:YYYY-MM-DD}.log"),
        rotation="00:00",
        retention="90 days",
        level="ERROR",
        format=FILE_FORMAT,
        backtrace=True,
        diagnose=False,
        enqueue=True,
    )
    logger.debug(f"Logging to {log_dir} at level {level}")
    return level


@contextmanager
def experiment_log(out_dir: str, run: str, level: Optional[str] = None) -> Iterator[Path]:
    """Bind ``run`` to every record logged inside the block and copy them to out_dir."""
    path = Path(out_dir) / EXPERIMENT_LOG
    path.parent.mkdir(parents=True, exist_ok=True)
    sink_id = logger.add(
        str(path),
        level=(level or settings.LOG_LEVEL).upper(),
        format=FILE_FORMAT,
        filter=lambda record: record["extra"].get("run") == run,
    )
    try:
        with logger.contextualize(run=run):
            yield path
    finally:
        logger.remove(sink_id)
