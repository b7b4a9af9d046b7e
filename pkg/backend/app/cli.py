"""
Command-line interface of the workbench.

    train | eval | bench | stress   run an experiment
    report                          export report tables from existing run logs

Exit codes: 0 success, 1 invalid input or configuration, 2 run aborted on a
non-finite plant state.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from loguru import logger
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import NonFiniteStateError, WorkbenchError
from app.core.logging_config import configure_logging
from app.models.enums import AgentMode, DisturbanceRegime, ExperimentMode
from app.models.experiment import ExperimentConfig

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NON_FINITE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="workbench", description=settings.APP_NAME)
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for mode in ExperimentMode:
        cmd = sub.add_parser(mode.value, help=f"Run a {mode.value} experiment")
        cmd.add_argument("--config", help="ExperimentConfig JSON file")
        cmd.add_argument("--seed", type=int, action="append", help="Seed (repeat for several)")
        cmd.add_argument("--checkpoint", help="Policy checkpoint path")
        cmd.add_argument("--out-dir", help="Output directory")
        cmd.add_argument("--agent-mode", choices=[m.value for m in AgentMode])
        cmd.add_argument("--regime", choices=[r.value for r in DisturbanceRegime])
        cmd.add_argument("--workers", type=int, help="Parallel closed loops (default MAX_CONCURRENT_TASKS)")
        if mode == ExperimentMode.TRAIN:
            cmd.add_argument("--resume", action="store_true", help="Continue from an existing checkpoint")

    report = sub.add_parser("report", help="Export report tables from run logs")
    report.add_argument("--out-dir", required=True, help="Directory holding run logs")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with the CLI flags applied on top."""
    base = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides: Dict[str, Any] = {"mode": args.command}
    if args.seed:
        overrides["seeds"] = args.seed
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.agent_mode:
        overrides["agent_mode"] = args.agent_mode
    if args.regime:
        overrides["regime"] = args.regime
        overrides["regimes"] = [args.regime]
    return ExperimentConfig.model_validate({**base.model_dump(mode="json"), **overrides})


def _run_report(out_dir: str) -> Dict[str, str]:
    from app.services.report_service import report_service

    runs = report_service.discover_runs(out_dir)
    return report_service.export_report(runs, str(Path(out_dir) / "report"))


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        if args.command == "report":
            summary: Any = _run_report(args.out_dir)
        else:
            from app.workers.tasks import run_experiment

            config = load_config(args)
            summary = run_experiment(config, resume=getattr(args, "resume", False), max_workers=args.workers)
    except NonFiniteStateError as e:
        logger.error(f"Run aborted on a non-finite plant state (step {e.step}): {e}")
        return EXIT_NON_FINITE
    except (ValidationError, WorkbenchError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_INVALID

    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
