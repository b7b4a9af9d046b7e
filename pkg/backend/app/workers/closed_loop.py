"""
Closed-loop execution of the adaptive stochastic NMPC.

One runner drives one (track, regime, agent, seed) episode. Every simulation step
follows the same order: measure, draw germ samples, update the reference, let the
scheduler act on switching steps, propagate the uncertainty, solve, apply the input.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from app.core.exceptions import NonFiniteStateError
from app.engines.rl.observation import (
    IntervalPerformance,
    ObservationScales,
    build_observation,
    reference_points_ego,
)
from app.engines.rl.reward import compute_reward
from app.engines.rl.scheduler import Decision, ParameterAgent, parameter_schedule
from app.engines.sim.environment import ClosedLoopEnv, InfeasibilityFallback, episode_status
from app.engines.snmpc.constraints import lateral_acceleration
from app.engines.snmpc.controller import PropagationResult, SnmpcController
from app.engines.snmpc.ocp import OcpSolution, SolverRecord
from app.engines.track.raceline import Raceline, project, reference_window
from app.engines.uncertainty.pce import SamplePack
from app.engines.vehicle.dynamics import StateIndex
from app.models.enums import DisturbanceRegime, EpisodeStatus, SolverStatus
from app.models.experiment import DisturbanceRanges, ExperimentConfig, SnmpcParams
from app.models.metrics import MetricsReport

TRAJECTORY_COLUMNS = [
    "step", "t", "s", "s_progress", "x_pos", "y_pos", "psi", "v_lon", "v_lat", "psi_dot", "delta_f", "a",
    "jerk", "omega_f", "v_ref", "curvature", "e_lat", "e_v", "a_lon", "a_lat", "h_true", "violated",
    "status", "fallback", "kappa", "N_u",
]
SOLVER_COLUMNS = [
    "step", "status", "kkt_residual", "max_slack", "sqp_iters", "solve_time_ms",
    "diverged", "kappa", "N_u", "switch_step", "last_variance_node", "retries",
]
DECISION_COLUMNS = ["step", "s", "curvature", "kappa", "N_u", "T_u", "source"]


class TransitionSink(Protocol):
    """Receives (observation, decision, reward) transitions during training."""

    def record(self, obs: np.ndarray, decision: Decision, reward: float, done: bool, next_obs: Optional[np.ndarray]): ...


@dataclass
class RunLog:
    """Per-step data of one run, written as CSV / JSON-lines."""

    header: Dict[str, Any] = field(default_factory=dict)
    trajectory: List[Dict[str, Any]] = field(default_factory=list)
    solver: List[Dict[str, Any]] = field(default_factory=list)
    decisions: List[Dict[str, Any]] = field(default_factory=list)

    def trajectory_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trajectory, columns=TRAJECTORY_COLUMNS)

    def solver_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.solver, columns=SOLVER_COLUMNS)

    def decision_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.decisions, columns=DECISION_COLUMNS)

    def write(self, out_dir: str) -> Dict[str, str]:
        """Write header.json, trajectory.csv, solver.jsonl and decisions.csv."""
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        paths = {
            "header": target / "header.json",
            "trajectory": target / "trajectory.csv",
            "solver": target / "solver.jsonl",
            "decisions": target / "decisions.csv",
        }
        with open(paths["header"], "w", encoding="utf-8") as f:
            json.dump(self.header, f, indent=2, default=str)
        self.trajectory_frame().to_csv(paths["trajectory"], index=False)
        solver = self.solver_frame()
        if solver.empty:
            paths["solver"].write_text("", encoding="utf-8")
        else:
            solver.to_json(paths["solver"], orient="records", lines=True)
        self.decision_frame().to_csv(paths["decisions"], index=False)
        return {k: str(v) for k, v in paths.items()}


@dataclass
class ClosedLoopResult:
    metrics: MetricsReport
    log: RunLog
    status: EpisodeStatus = EpisodeStatus.RUNNING


class _IntervalTracker:
    """Accumulates performance between two switching steps."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.e_lat_max = 0.0
        self.violated = False
        self.infeasible = False

    def add(self, e_lat: float, violated: bool, infeasible: bool):
        self.e_lat_max = max(self.e_lat_max, abs(e_lat))
        self.violated |= violated
        self.infeasible |= infeasible

    def summary(self) -> IntervalPerformance:
        return IntervalPerformance(self.e_lat_max, self.violated, self.infeasible)


def regime_ranges(config: ExperimentConfig, regime: DisturbanceRegime) -> DisturbanceRanges:
    """Simulated disturbance ranges of a regime (the mismatched regime simulates the nominal ranges)."""
    if regime == DisturbanceRegime.NONE:
        return DisturbanceRanges.zero()
    if regime == DisturbanceRegime.EQ8_STRESS:
        return DisturbanceRanges.widened()
    return config.sim.disturbance_ranges


class ClosedLoopRunner:
    """
    Executes one closed-loop episode.

    Args:
        config: Experiment configuration
        track: Raceline driven
        agent: Parameter scheduler
        regime: Disturbance regime
        seed: Seed of the plant noise and of the germ draws
        scales: Observation scales (from the checkpoint for policy agents)
        training: Truncate on infeasibility and end at lap completion
    """

    def __init__(
        self,
        config: ExperimentConfig,
        track: Raceline,
        agent: ParameterAgent,
        regime: DisturbanceRegime,
        seed: int,
        scales: Optional[ObservationScales] = None,
        training: bool = False,
    ):
        self.config = config
        self.track = track
        self.agent = agent
        self.regime = regime
        self.seed = seed
        self.training = training

        ranges = regime_ranges(config, regime)
        self.sim_config = config.sim.model_copy(update={"disturbance_ranges": ranges})
        self.scales = scales or ObservationScales.from_ranges(ranges.sigma_max)
        self.assumed_sigma = np.array(ranges.midpoints()) if regime == DisturbanceRegime.TABLE3_MISMATCHED else None

        self.env = ClosedLoopEnv(self.sim_config, config.snmpc, config.vehicle, track, np.random.default_rng([seed, 0]))
        self.controller = SnmpcController(
            config.snmpc,
            config.vehicle,
            np.random.default_rng([seed, 1]),
            shift_fraction=config.sim.T_s_sim / config.snmpc.T_s,
        )
        self.fallback = InfeasibilityFallback(config.sim.fallback_jerk, config.snmpc.a_x_brake)
        self.horizon_times = np.arange(config.snmpc.n_nodes + 1) * config.snmpc.T_s
        self.switching_steps = config.switching_steps

    def _header(self) -> Dict[str, Any]:
        default = SnmpcParams.static_default(self.config.snmpc)
        return {
            "track": self.track.name,
            "regime": self.regime.value,
            "agent_mode": self.agent.mode.value,
            "seed": self.seed,
            "training": self.training,
            "kappa_default": default.kappa,
            "T_u_default": self.config.snmpc.T_u_default,
            "N_u_default": default.N_u,
            "N_p": self.config.snmpc.n_nodes,
            "T_s": self.config.snmpc.T_s,
            "T_s_sim": self.config.sim.T_s_sim,
            "switching_steps": self.switching_steps,
            "sigma_min": list(self.sim_config.disturbance_ranges.sigma_min),
            "sigma_max": list(self.sim_config.disturbance_ranges.sigma_max),
            "assumed_sigma": None if self.assumed_sigma is None else self.assumed_sigma.tolist(),
        }

    def _sigma(self, active_spec: np.ndarray) -> np.ndarray:
        return active_spec if self.assumed_sigma is None else self.assumed_sigma

    def _observe(self, measured: np.ndarray, s: float, sigma: np.ndarray, perf: IntervalPerformance) -> np.ndarray:
        pose = (measured[StateIndex.X_POS], measured[StateIndex.Y_POS], measured[StateIndex.PSI])
        refs_ego = reference_points_ego(self.track, s, pose, measured[StateIndex.V_LON], self.config.snmpc)
        return build_observation(measured, self.controller.params, perf, refs_ego, sigma, self.config.snmpc.n_nodes, self.scales)

    def _trace(self, log: RunLog, step: int, s: float, params: SnmpcParams, source: str):
        log.decisions.append({
            "step": step,
            "s": s,
            "curvature": self.track.point_at(s).curvature,
            "kappa": params.kappa,
            "N_u": params.N_u,
            "T_u": params.N_u * self.config.snmpc.T_s,
            "source": source,
        })

    def _propagate_and_solve(self, pack: Optional[SamplePack], measured: np.ndarray, refs, warm) -> Tuple[PropagationResult, OcpSolution]:
        if pack is None:
            propagation = self.controller.nominal_propagation()
        else:
            propagation = self.controller.propagate(pack, warm)
        return propagation, self.controller.solve(measured, refs, propagation, warm)

    def run(self, n_steps: int, sink: Optional[TransitionSink] = None) -> ClosedLoopResult:
        """
        Run up to n_steps simulation steps.

        Evaluation continues through infeasible solves on the fallback controls;
        training truncates at the first infeasible solve and stops at lap completion.
        NonFiniteStateError is logged, the partial log is kept and the error re-raised.
        """
        cfg = self.config
        log = RunLog(header=self._header())
        env = self.env.reset()
        self.agent.reset()
        self.controller.reset()
        self.controller.set_params(SnmpcParams.static_default(cfg.snmpc))
        self.fallback = InfeasibilityFallback(cfg.sim.fallback_jerk, cfg.snmpc.a_x_brake)

        interval = _IntervalTracker()
        pending: Optional[tuple] = None
        switch_step = 0
        status = EpisodeStatus.RUNNING
        aborted, abort_reason = False, None

        try:
            for i in range(n_steps):
                measured = env.measured_state
                sigma = self._sigma(env.active_spec)
                pack = self.controller.sample(measured, sigma) if self.agent.propagates_uncertainty else None
                warm = self.controller.warm_start(measured)

                s_meas, _ = project(self.track, measured[StateIndex.X_POS], measured[StateIndex.Y_POS], env.s)
                refs = reference_window(self.track, s_meas, self.horizon_times, measured[StateIndex.V_LON], a_max=cfg.snmpc.a_x_max)

                if parameter_schedule(i, self.switching_steps):
                    obs = self._observe(measured, s_meas, sigma, interval.summary()) if self.agent.needs_observation else None
                    if pending is not None and sink is not None:
                        perf = interval.summary()
                        reward = compute_reward(perf.e_lat_max, perf.violated, perf.infeasible, cfg.ppo.reward_peak, cfg.ppo.sigma_lat)
                        sink.record(pending[0], pending[1], reward, False, obs)
                    interval.reset()
                    decision = self.agent.decide(i, obs)
                    self.controller.set_params(decision.params)
                    self._trace(log, i, s_meas, decision.params, "switch")
                    switch_step = i
                    pending = (obs, decision) if obs is not None else None

                propagation, solution = self._propagate_and_solve(pack, measured, refs, warm)
                changed = self.agent.observe_step(i, solution.status, propagation.diverged)
                retries = 0
                # same-step retry with the reduced horizon until feasible or N_u stops shrinking
                while changed is not None and self.agent.retries_on_incident and solution.status == SolverStatus.INFEASIBLE:
                    self.controller.set_params(changed)
                    self._trace(log, i, s_meas, changed, "reactive")
                    propagation, solution = self._propagate_and_solve(pack, measured, refs, warm)
                    retries += 1
                    changed = self.agent.observe_step(i, solution.status, propagation.diverged)

                params = self.controller.params
                variance_nodes = [n.node for n in propagation.nodes if n.h_var > 0.0]
                record = SolverRecord.from_solution(i, solution).to_dict()
                record.update({
                    "diverged": propagation.diverged,
                    "kappa": params.kappa,
                    "N_u": params.N_u,
                    "switch_step": switch_step,
                    "last_variance_node": max(variance_nodes) if variance_nodes else -1,
                    "retries": retries,
                })
                log.solver.append(record)

                infeasible = solution.status == SolverStatus.INFEASIBLE
                if changed is not None:
                    self.controller.set_params(changed)
                    self._trace(log, i, s_meas, changed, "reactive")

                self.fallback.update(solution)
                if infeasible:
                    if self.training:
                        interval.add(0.0, False, True)
                        status = EpisodeStatus.TRUNCATED_INFEASIBLE
                        logger.debug(f"Episode truncated at step {i}: infeasible solve")
                        break
                    u0 = self.fallback.next_control(measured)
                else:
                    u0 = solution.u0

                outcome = self.env.step(u0)
                env = outcome.env
                x = env.true_state
                v_ref = self.track.speed_at(env.s)
                log.trajectory.append({
                    "step": i,
                    "t": (i + 1) * cfg.sim.T_s_sim,
                    "s": env.s,
                    "s_progress": env.s_progress,
                    "x_pos": x[StateIndex.X_POS],
                    "y_pos": x[StateIndex.Y_POS],
                    "psi": x[StateIndex.PSI],
                    "v_lon": x[StateIndex.V_LON],
                    "v_lat": x[StateIndex.V_LAT],
                    "psi_dot": x[StateIndex.PSI_DOT],
                    "delta_f": x[StateIndex.DELTA_F],
                    "a": x[StateIndex.A],
                    "jerk": float(u0[0]),
                    "omega_f": float(u0[1]),
                    "v_ref": v_ref,
                    "curvature": self.track.point_at(env.s).curvature,
                    "e_lat": outcome.e_lat_true,
                    "e_v": x[StateIndex.V_LON] - v_ref,
                    "a_lon": x[StateIndex.A],
                    "a_lat": float(lateral_acceleration(x)),
                    "h_true": outcome.h_true,
                    "violated": outcome.violated,
                    "status": solution.status.value,
                    "fallback": infeasible,
                    "kappa": params.kappa,
                    "N_u": params.N_u,
                })
                interval.add(outcome.e_lat_true, outcome.violated, infeasible)

                if self.training:
                    status = episode_status(env, solution.status)
                    if status != EpisodeStatus.RUNNING:
                        break
        except NonFiniteStateError as e:
            aborted, abort_reason = True, str(e)
            logger.error(f"Run aborted ({self.track.name}, {self.regime.value}, seed {self.seed}): {e}")

        if pending is not None and sink is not None and not aborted:
            perf = interval.summary()
            reward = compute_reward(perf.e_lat_max, perf.violated, perf.infeasible, cfg.ppo.reward_peak, cfg.ppo.sigma_lat)
            sink.record(pending[0], pending[1], reward, True, None)

        metrics = MetricsReport.from_frames(
            log.trajectory_frame(),
            log.solver_frame(),
            self.track.total_length,
            aborted=aborted,
            abort_reason=abort_reason,
            label=f"{self.track.name}_{self.regime.value}_{self.agent.mode.value}_seed{self.seed}",
            track=self.track.name,
            regime=self.regime,
            agent_mode=self.agent.mode,
            seed=self.seed,
        )
        result = ClosedLoopResult(metrics, log, status)
        if aborted:
            error = NonFiniteStateError(abort_reason, step=len(log.trajectory))
            error.partial = result
            raise error
        return result
