"""
Experiment tasks shared by the CLI and the HTTP API.

Tasks run synchronously in the calling process; evaluations fan out over a process
pool, one closed loop per worker.
"""
import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger

from app.core.config import settings
from app.core.exceptions import CheckpointError, NonFiniteStateError
from app.core.logging_config import experiment_log
from app.engines.rl.observation import OBS_DIM, ObservationScales
from app.engines.rl.policy import PolicyNet, policy_forward
from app.engines.rl.ppo import (
    CheckpointState,
    PpoTrainer,
    RolloutBuffer,
    load_checkpoint,
    restore_trainer,
    save_checkpoint,
)
from app.engines.rl.scheduler import Decision, PolicyAgent, build_agent, load_replay_sequence
from app.engines.track.raceline import Raceline
from app.engines.track.track_loader import TrackLoader
from app.models.enums import AgentMode, DisturbanceRegime, ExperimentMode
from app.models.experiment import ExperimentConfig
from app.models.metrics import ComparisonReport, MetricsReport
from app.services.report_service import report_service
from app.workers.closed_loop import ClosedLoopResult, ClosedLoopRunner, regime_ranges

TRAINING_METRICS_COLUMNS = [
    "update_idx", "total_steps", "mean_reward", "policy_loss", "value_loss", "entropy",
    "approx_kl", "clip_fraction", "episode_count", "infeasibility_rate", "aborted",
]
POLICY_MODES = (AgentMode.ADAPTIVE, AgentMode.ADAPT_KAPPA_ONLY, AgentMode.ADAPT_UPH_ONLY)

_track_loader: Optional[TrackLoader] = None


def load_track(config: ExperimentConfig, name: Optional[str] = None) -> Raceline:
    global _track_loader
    if _track_loader is None:
        _track_loader = TrackLoader()
    return _track_loader.load_raceline(name or config.track, config.a_y_max_track, config.a_x_max_track, config.v_top)


def output_dir(config: ExperimentConfig) -> Path:
    return Path(config.out_dir or Path(settings.OUTPUT_DIR) / config.mode.value)


def checkpoint_path(config: ExperimentConfig) -> Path:
    return Path(config.checkpoint or Path(settings.CHECKPOINT_DIR) / "policy.pt")


def _load_policy(config: ExperimentConfig) -> Tuple[PolicyNet, ObservationScales]:
    state = load_checkpoint(str(checkpoint_path(config)))
    if state.spec.obs_dim != config.policy.obs_dim or state.spec.n_uph != config.policy.n_uph:
        raise CheckpointError(
            f"Checkpoint policy ({state.spec.obs_dim} inputs, {state.spec.n_uph} UPH actions) does not match "
            f"the configuration ({config.policy.obs_dim}, {config.policy.n_uph})"
        )
    return state.build_policy(), state.scales


def run_closed_loop(
    config: ExperimentConfig,
    track_name: Optional[str] = None,
    regime: Optional[DisturbanceRegime] = None,
    agent_mode: Optional[AgentMode] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> ClosedLoopResult:
    """
    One evaluation run of duration_s on a track, with logs written to out_dir if given.

    Policy agent modes load the configured checkpoint (read-only); replay mode reads
    the configured decision trace.
    """
    regime = regime or config.regime
    agent_mode = agent_mode or config.agent_mode
    seed = config.seeds[0] if seed is None else seed
    track = load_track(config, track_name)

    net, scales = (None, None)
    if agent_mode in POLICY_MODES:
        net, scales = _load_policy(config)
    replay = None
    if agent_mode == AgentMode.REPLAY:
        if not config.replay_actions:
            raise ValueError("Replay mode needs replay_actions (a decision trace CSV)")
        replay = load_replay_sequence(config.replay_actions)
    agent = build_agent(agent_mode, config.snmpc, config.switching_steps, net=net, replay=replay)

    runner = ClosedLoopRunner(config, track, agent, regime, seed, scales=scales)
    logger.info(
        f"Closed loop: track={track.name} regime={regime.value} agent={agent_mode.value} seed={seed} "
        f"steps={config.duration_steps}"
    )
    try:
        result = runner.run(config.duration_steps)
    except NonFiniteStateError as e:
        if out_dir and e.partial is not None:
            _write_result(e.partial, out_dir)
        raise
    if out_dir:
        _write_result(result, out_dir)
    logger.info(
        f"Run {result.metrics.label}: max|e_lat|={result.metrics.max_abs_e_lat:.4f} m, "
        f"infeasible={result.metrics.infeasible_steps}, violations={result.metrics.violation_count}"
    )
    return result


def _write_result(result: ClosedLoopResult, out_dir: str):
    result.log.write(out_dir)
    (Path(out_dir) / "metrics.json").write_text(result.metrics.model_dump_json(indent=2), encoding="utf-8")


def _evaluation_job(payload: Dict[str, Any]) -> Dict[str, Any]:
    """Process-pool entry point: one run, returns the metrics as a dict."""
    torch.set_num_threads(settings.TORCH_NUM_THREADS)
    config = ExperimentConfig.model_validate_json(payload["config"])
    result = run_closed_loop(
        config,
        track_name=payload["track"],
        regime=DisturbanceRegime(payload["regime"]),
        agent_mode=AgentMode(payload["agent_mode"]),
        seed=payload["seed"],
        out_dir=payload["out_dir"],
    )
    return result.metrics.model_dump(mode="json")


def run_matrix(
    config: ExperimentConfig,
    tracks: Sequence[str],
    regimes: Sequence[DisturbanceRegime],
    modes: Sequence[AgentMode],
    seeds: Sequence[int],
    out_dir: Path,
    max_workers: Optional[int] = None,
) -> List[MetricsReport]:
    """Run every (track, regime, mode, seed) combination; results in a fixed order."""
    jobs = []
    config_json = config.model_dump_json()
    for track in tracks:
        for regime in regimes:
            for mode in modes:
                for seed in seeds:
                    label = f"{track}_{regime.value}_{mode.value}_seed{seed}"
                    jobs.append({
                        "config": config_json,
                        "track": track,
                        "regime": regime.value,
                        "agent_mode": mode.value,
                        "seed": seed,
                        "out_dir": str(out_dir / "runs" / label),
                    })
    workers = max_workers or settings.MAX_CONCURRENT_TASKS
    logger.info(f"Running {len(jobs)} closed loops on {workers} workers")
    if workers <= 1:
        results = [_evaluation_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluation_job, jobs))
    return [MetricsReport.model_validate(r) for r in results]


def _finish_comparison(runs: List[MetricsReport], out_dir: Path, static_mode: AgentMode = AgentMode.STATIC) -> ComparisonReport:
    report = ComparisonReport.from_runs(runs, static_mode)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "comparison.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    pd.DataFrame([r.model_dump(mode="json") for r in runs], columns=list(MetricsReport.model_fields)).to_csv(
        out_dir / "metrics.csv", index=False
    )
    run_dirs = out_dir / "runs"
    logs = report_service.discover_runs(str(run_dirs)) if run_dirs.exists() else []
    report_service.export_report(logs, str(out_dir / "report"))
    for key, value in report.median_improvement_pct.items():
        logger.info(f"Median improvement {key}: {value:.2f}%")
    return report


def evaluate_compare(
    config: ExperimentConfig,
    regimes: Optional[Sequence[DisturbanceRegime]] = None,
    seeds: Optional[Sequence[int]] = None,
    tracks: Optional[Sequence[str]] = None,
    max_workers: Optional[int] = None,
) -> ComparisonReport:
    """
    Static versus the configured agent over regimes and seeds, paired by seed.

    The configured agent defaults to the adaptive policy; a static agent mode gives
    the self-comparison.
    """
    regimes = list(regimes or config.regimes)
    seeds = list(seeds or config.seeds)
    tracks = list(tracks or [config.track])
    candidate = config.agent_mode
    if candidate in POLICY_MODES and not checkpoint_path(config).exists():
        raise CheckpointError(f"Evaluation needs a trained checkpoint at {checkpoint_path(config)}")

    modes = [AgentMode.STATIC] if candidate == AgentMode.STATIC else [AgentMode.STATIC, candidate]
    out = output_dir(config)
    runs = run_matrix(config, tracks, regimes, modes, seeds, out, max_workers)
    return _finish_comparison(runs, out)


def run_bench(config: ExperimentConfig, max_workers: Optional[int] = None) -> ComparisonReport:
    """Ablation and generalization benchmark: every agent variant on the training and held-out tracks."""
    modes = [AgentMode.STATIC, AgentMode.ADAPTIVE, AgentMode.ADAPT_KAPPA_ONLY, AgentMode.ADAPT_UPH_ONLY]
    if not checkpoint_path(config).exists():
        raise CheckpointError(f"Benchmark needs a trained checkpoint at {checkpoint_path(config)}")
    tracks = [config.track] + [t for t in config.eval_tracks if t != config.track]
    out = output_dir(config)
    runs = run_matrix(config, tracks, [config.regime], modes, config.seeds, out, max_workers)
    return _finish_comparison(runs, out)


def run_stress(config: ExperimentConfig, max_workers: Optional[int] = None) -> ComparisonReport:
    """
    Feasibility stress test under the widened disturbance ranges: static against the
    configured agent (adaptive policy or the deterministic UPH-halving rule).
    """
    candidate = config.agent_mode if config.agent_mode != AgentMode.STATIC else AgentMode.UPH_HALVING
    if candidate in POLICY_MODES and not checkpoint_path(config).exists():
        raise CheckpointError(f"Stress test needs a trained checkpoint at {checkpoint_path(config)}")
    out = output_dir(config)
    runs = run_matrix(config, [config.track], [DisturbanceRegime.EQ8_STRESS], [AgentMode.STATIC, candidate], config.seeds, out, max_workers)
    report = _finish_comparison(runs, out)
    for mode in (AgentMode.STATIC, candidate):
        seeds_hit = sum(1 for r in runs if r.agent_mode == mode and r.infeasible_steps > 0)
        logger.info(f"Stress {mode.value}: infeasible steps in {seeds_hit} of {len(config.seeds)} seeds")
    return report


class TrainingCollector:
    """
    Rollout sink used during training: fills the buffer, runs PPO when it is full,
    appends training metrics and writes periodic checkpoints.
    """

    def __init__(
        self,
        trainer: PpoTrainer,
        config: ExperimentConfig,
        scales: ObservationScales,
        metrics_path: Path,
        checkpoint_file: Path,
        episode_count: int = 0,
    ):
        self.trainer = trainer
        self.config = config
        self.scales = scales
        self.buffer = RolloutBuffer(config.ppo.n_steps, config.policy.obs_dim)
        self.metrics_path = metrics_path
        self.checkpoint_file = checkpoint_file
        self.episode_count = episode_count
        self.rows: List[Dict[str, Any]] = []
        self._infeasible: List[bool] = []

    def record(self, obs: np.ndarray, decision: Decision, reward: float, done: bool, next_obs: Optional[np.ndarray]):
        self.buffer.add(obs, decision.action, decision.log_prob, decision.value, reward, done)
        self._infeasible.append(reward <= -self.config.ppo.reward_peak)
        self.trainer.total_steps += 1
        if not self.buffer.full:
            return

        last_value = 0.0 if done or next_obs is None else policy_forward(self.trainer.net, next_obs)[2]
        stats = self.trainer.update(self.buffer, last_value)
        row = {
            "update_idx": self.trainer.update_idx,
            "total_steps": self.trainer.total_steps,
            "episode_count": self.episode_count,
            "infeasibility_rate": float(np.mean(self._infeasible)),
            **stats.to_dict(),
        }
        self._append_metrics(row)
        self.buffer.reset()
        self._infeasible = []
        if self.trainer.update_idx % self.config.ppo.checkpoint_every_updates == 0:
            self.save()

    def _append_metrics(self, row: Dict[str, Any]):
        self.rows.append(row)
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not self.metrics_path.exists()
        with open(self.metrics_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=TRAINING_METRICS_COLUMNS, extrasaction="ignore")
            if new_file:
                writer.writeheader()
            writer.writerow(row)

    def save(self):
        save_checkpoint(str(self.checkpoint_file), self.trainer, self.scales, self.episode_count)


def train_agent(config: ExperimentConfig, resume: bool = False) -> Dict[str, Any]:
    """
    PPO training of the scheduler policy on the configured track and regime.

    Every episode draws fresh disturbance ranges; episodes end at lap completion or
    are truncated at the first infeasible solve. With resume set and an existing
    checkpoint, training continues from its weights, optimizer, counters and RNG state.
    """
    torch.set_num_threads(settings.TORCH_NUM_THREADS)
    ckpt = checkpoint_path(config)
    out = output_dir(config)
    metrics_path = out / "training_metrics.csv"
    base_seed = config.seeds[0]
    track = load_track(config)

    if config.policy.obs_dim != OBS_DIM:
        raise ValueError(f"Policy input size {config.policy.obs_dim} does not match the observation size {OBS_DIM}")

    episode_count = 0
    if resume and ckpt.exists():
        state: CheckpointState = load_checkpoint(str(ckpt))
        trainer = restore_trainer(state, config.ppo, base_seed)
        scales = state.scales
        episode_count = state.episode_count
        logger.info(f"Resuming training at step {trainer.total_steps} (episode {episode_count})")
    else:
        torch.manual_seed(base_seed)
        trainer = PpoTrainer(PolicyNet(config.policy), config.ppo, base_seed)
        scales = ObservationScales.from_ranges(regime_ranges(config, config.regime).sigma_max)
        if metrics_path.exists():
            metrics_path.unlink()

    collector = TrainingCollector(trainer, config, scales, metrics_path, ckpt, episode_count)
    agent = PolicyAgent(config.snmpc, trainer.net, trainer.generator, deterministic=False)

    while trainer.total_steps < config.ppo.total_steps:
        runner = ClosedLoopRunner(
            config, track, agent, config.regime, base_seed * 1_000_003 + collector.episode_count, scales=scales, training=True
        )
        try:
            result = runner.run(config.sim.max_episode_steps, sink=collector)
        except NonFiniteStateError as e:
            logger.warning(f"Training episode {collector.episode_count} aborted: {e}")
        else:
            logger.debug(
                f"Episode {collector.episode_count}: {result.status.value}, steps={result.metrics.steps}, "
                f"max|e_lat|={result.metrics.max_abs_e_lat:.3f}"
            )
        collector.episode_count += 1

    collector.save()
    logger.info(f"Training finished after {trainer.total_steps} agent steps, {trainer.update_idx} updates")
    return {
        "checkpoint": str(ckpt),
        "training_metrics": str(metrics_path),
        "total_steps": trainer.total_steps,
        "updates": trainer.update_idx,
        "episodes": collector.episode_count,
    }


def run_experiment(config: ExperimentConfig, resume: bool = False, max_workers: Optional[int] = None) -> Dict[str, Any]:
    """
    Dispatch on config.mode; returns a JSON-serializable summary.

    The experiment's own records also go to ``experiment.log`` in its output directory.
    """
    out = output_dir(config)
    with experiment_log(str(out), run=f"{config.mode.value}:{out.name}"):
        logger.info(f"Experiment mode={config.mode.value} track={config.track} agent={config.agent_mode.value}")
        if config.mode == ExperimentMode.TRAIN:
            return train_agent(config, resume=resume)
        if config.mode == ExperimentMode.EVAL:
            report = evaluate_compare(config, max_workers=max_workers)
        elif config.mode == ExperimentMode.BENCH:
            report = run_bench(config, max_workers=max_workers)
        else:
            report = run_stress(config, max_workers=max_workers)
        return report.model_dump(mode="json")
