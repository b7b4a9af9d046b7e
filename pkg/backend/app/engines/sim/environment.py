"""
Closed-loop plant with time-varying Gaussian state-estimation disturbances.

The true vehicle integrates undisturbed dynamics at T_s_sim. The controller sees
measured_state = true_state + w, with w ~ N(0, diag(sigma^2)) on the first seven state
components. sigma is re-sampled uniformly from its ranges at every reset and every
range_switch_period.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from loguru import logger

from app.core.exceptions import DynamicsDomainError, NonFiniteStateError
from app.engines.snmpc.constraints import acceleration_ratio
from app.engines.snmpc.ocp import OcpSolution
from app.engines.track.raceline import Raceline, project
from app.engines.vehicle.dynamics import NU, NX, InputIndex, StateIndex, integrate_step
from app.models.enums import EpisodeStatus, SolverStatus
from app.models.experiment import SimConfig, SnmpcConfig, VehicleParams

N_DISTURBED = 7


@dataclass(frozen=True)
class EnvState:
    """Snapshot of the closed loop after a reset or a step."""

    true_state: np.ndarray
    measured_state: np.ndarray
    active_spec: np.ndarray
    sim_step: int
    s: float
    s_progress: float
    lap_done: bool


@dataclass(frozen=True)
class StepOutcome:
    env: EnvState
    e_lat_true: float
    h_true: float
    violated: bool
    spec_switched: bool


def sample_spec(sim_config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of every sigma component from its range."""
    ranges = sim_config.disturbance_ranges
    return rng.uniform(np.asarray(ranges.sigma_min), np.asarray(ranges.sigma_max))


def measure(true_state: np.ndarray, spec: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    measured = np.array(true_state, dtype=float)
    measured[:N_DISTURBED] += rng.standard_normal(N_DISTURBED) * spec
    return measured


class ClosedLoopEnv:
    """
    Single-vehicle environment on one raceline. Strictly sequential per instance.

    Args:
        sim_config: Plant step, disturbance ranges and episode definition
        snmpc_config: Acceleration and steering limits used for h and violations
        vehicle: Plant parameters
        track: Raceline to follow
        rng: Generator for disturbance ranges and measurement noise
    """

    def __init__(
        self,
        sim_config: SimConfig,
        snmpc_config: SnmpcConfig,
        vehicle: VehicleParams,
        track: Raceline,
        rng: np.random.Generator,
    ):
        self.sim_config = sim_config
        self.snmpc_config = snmpc_config
        self.vehicle = vehicle
        self.track = track
        self.rng = rng
        self.state: Optional[EnvState] = None

    def reset(self) -> EnvState:
        """Place the vehicle on the raceline start at reference speed and draw a fresh spec."""
        start = self.track.point_at(0.0)
        true_state = np.zeros(NX)
        true_state[StateIndex.X_POS] = start.x
        true_state[StateIndex.Y_POS] = start.y
        true_state[StateIndex.PSI] = start.psi
        true_state[StateIndex.V_LON] = start.v_ref

        spec = sample_spec(self.sim_config, self.rng)
        self.state = EnvState(
            true_state=true_state,
            measured_state=measure(true_state, spec, self.rng),
            active_spec=spec,
            sim_step=0,
            s=0.0,
            s_progress=0.0,
            lap_done=False,
        )
        logger.debug(f"Environment reset on '{self.track.name}', sigma={np.round(spec, 4).tolist()}")
        return self.state

    def step(self, u0: np.ndarray) -> StepOutcome:
        """Apply u0 for one plant step, then measure, re-schedule and evaluate."""
        if self.state is None:
            raise RuntimeError("reset must be called before step")
        env = self.state
        u = np.asarray(u0, dtype=float).reshape(NU).copy()
        u[InputIndex.OMEGA_F] = np.clip(u[InputIndex.OMEGA_F], -self.snmpc_config.omega_max, self.snmpc_config.omega_max)

        try:
            true_state = integrate_step(env.true_state, u, self.sim_config.T_s_sim, self.vehicle)
        except DynamicsDomainError as e:
            raise NonFiniteStateError(f"Plant left the model domain at step {env.sim_step}: {e}", step=env.sim_step) from e
        if not np.all(np.isfinite(true_state)):
            raise NonFiniteStateError(f"Non-finite plant state at step {env.sim_step}", step=env.sim_step)

        sim_step = env.sim_step + 1
        spec = env.active_spec
        switched = sim_step % self.sim_config.range_switch_steps == 0
        if switched:
            spec = sample_spec(self.sim_config, self.rng)
            logger.debug(f"Disturbance spec switched at step {sim_step}: {np.round(spec, 4).tolist()}")

        s_new, e_lat = project(self.track, true_state[StateIndex.X_POS], true_state[StateIndex.Y_POS], env.s)
        ds = s_new - env.s
        if self.track.closed:
            ds = math.remainder(ds, self.track.total_length)
        s_progress = env.s_progress + ds
        lap_done = s_progress >= self.sim_config.laps_per_episode * self.track.total_length

        h_true = float(acceleration_ratio(true_state, self.snmpc_config))
        violated = h_true > 1.0 or abs(true_state[StateIndex.DELTA_F]) > self.snmpc_config.delta_max

        self.state = EnvState(
            true_state=true_state,
            measured_state=measure(true_state, spec, self.rng),
            active_spec=spec,
            sim_step=sim_step,
            s=s_new,
            s_progress=s_progress,
            lap_done=lap_done,
        )
        return StepOutcome(self.state, float(e_lat), h_true, bool(violated), switched)


def episode_status(env: EnvState, solver_status: Optional[SolverStatus]) -> EpisodeStatus:
    """Truncation on an infeasible solve takes precedence over lap completion."""
    if solver_status == SolverStatus.INFEASIBLE:
        return EpisodeStatus.TRUNCATED_INFEASIBLE
    if env.lap_done:
        return EpisodeStatus.TERMINATED_LAP_COMPLETE
    return EpisodeStatus.RUNNING


class InfeasibilityFallback:
    """
    Controls applied while the SNMPC reports infeasible solves.

    Consumes the last feasible plan node by node, then brakes.
    """

    def __init__(self, braking_jerk: float, a_x_brake: float, v_stop: float = 3.0):
        self.braking_jerk = braking_jerk
        self.a_x_brake = a_x_brake
        self.v_stop = v_stop
        self.plan: Optional[np.ndarray] = None
        self.consumed = 0

    @property
    def active(self) -> bool:
        return self.consumed > 0

    def update(self, solution: OcpSolution):
        """Register a solve; a feasible one becomes the new plan and resets the fallback."""
        if solution.status != SolverStatus.INFEASIBLE:
            self.plan = np.array(solution.controls, dtype=float)
            self.consumed = 0

    def braking_input(self, state: Optional[np.ndarray] = None) -> np.ndarray:
        jerk = -self.braking_jerk
        if state is not None:
            a = state[StateIndex.A]
            if state[StateIndex.V_LON] < self.v_stop:
                # release the brake before standstill
                jerk = self.braking_jerk if a < 0.0 else 0.0
            elif a <= -self.a_x_brake:
                jerk = 0.0
        return np.array([jerk, 0.0])

    def next_control(self, state: Optional[np.ndarray] = None) -> np.ndarray:
        self.consumed += 1
        if self.plan is not None and self.consumed < len(self.plan):
            return self.plan[self.consumed].copy()
        return self.braking_input(state)