"""
Experiment configuration schemas.

Every run (training, evaluation, benchmark, stress test) is described by one
ExperimentConfig. The tree is plain pydantic so it round-trips through JSON files,
CLI overrides and the HTTP API without translation.
"""
import json
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from app.models.enums import AgentMode, DisturbanceRegime, ExperimentMode

# Order of the disturbed state components
DISTURBANCE_COMPONENTS = ("x_pos", "y_pos", "psi", "v_lon", "v_lat", "psi_dot", "delta_f")

NOMINAL_SIGMA_MIN = [0.1, 0.1, 0.008, 0.5, 0.5, 0.04, 0.001]
NOMINAL_SIGMA_MAX = [0.3, 0.3, 0.017, 1.0, 1.0, 0.08, 0.0017]


def _is_integer_ratio(numerator: float, denominator: float, tol: float = 1e-9) -> bool:
    ratio = numerator / denominator
    return abs(ratio - round(ratio)) < tol


class VehicleParams(BaseModel):
    """Single-track model parameters (van class)."""

    mass: float = 2500.0
    yaw_inertia: float = 4800.0
    dist_front: float = 1.5
    dist_rear: float = 1.6
    cornering_stiffness_front: float = 90_000.0
    cornering_stiffness_rear: float = 110_000.0
    v_lon_min_model: float = 1.0

    model_config = {"frozen": True}

    @field_validator("*")
    @classmethod
    def strictly_positive(cls, v, info):
        if not v > 0:
            raise ValueError(f"{info.field_name} must be strictly positive, got {v}")
        return v

    @property
    def wheelbase(self) -> float:
        return self.dist_front + self.dist_rear


class SnmpcConfig(BaseModel):
    """Discretization, weights and limits of the stochastic NMPC."""

    T_p: float = 3.04
    T_s: float = 0.08
    N_p: Optional[int] = None

    # residuals (x, y, psi, v_lon, delta_f, a)
    stage_weights: List[float] = Field(default_factory=lambda: [8.0, 8.0, 4.0, 2.0, 0.5, 0.1])
    # terminal residuals (x, y, psi, v_lon)
    terminal_weights: List[float] = Field(default_factory=lambda: [80.0, 80.0, 40.0, 20.0])
    # (jerk, omega_f) regularization, keeps the Gauss-Newton Hessian positive definite
    input_weights: List[float] = Field(default_factory=lambda: [1e-3, 1e-2])

    a_x_max: float = 4.5
    a_x_brake: float = 4.5
    a_y_max: float = 5.0
    delta_max: float = 0.61
    omega_max: float = 0.322

    sqp_max_iters: int = 30
    qp_tolerance: float = 1e-6
    slack_penalty: float = 1e4
    slack_l2_penalty: float = 1.0
    infeasibility_slack: float = 1e-3
    line_search_beta: float = 0.5
    line_search_max_steps: int = 12
    integrator_substeps: int = 1

    n_samples: int = 20
    pce_order: int = 2
    germ_dim: int = 3
    divergence_speed: float = 200.0

    kappa_default: float = 0.42
    T_u_default: float = 2.0

    @model_validator(mode="after")
    def check_horizon(self):
        if self.T_p <= 0 or self.T_s <= 0:
            raise ValueError("T_p and T_s must be positive")
        n_nodes = int(round(self.T_p / self.T_s))
        if n_nodes < 1:
            raise ValueError(f"Horizon T_p={self.T_p} shorter than one node T_s={self.T_s}")
        if self.N_p is None:
            self.N_p = n_nodes
        elif self.N_p != n_nodes:
            raise ValueError(f"N_p={self.N_p} inconsistent with round(T_p/T_s)={n_nodes}")
        if len(self.stage_weights) != 6 or len(self.terminal_weights) != 4 or len(self.input_weights) != 2:
            raise ValueError("Weight vectors must have lengths 6 (stage), 4 (terminal), 2 (input)")
        for name in ("stage_weights", "terminal_weights", "input_weights"):
            if any(w < 0 for w in getattr(self, name)):
                raise ValueError(f"{name} must be nonnegative")
        for name in ("a_x_max", "a_x_brake", "a_y_max", "delta_max", "omega_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sqp_max_iters < 1 or self.qp_tolerance <= 0:
            raise ValueError("sqp_max_iters >= 1 and qp_tolerance > 0 required")
        if self.integrator_substeps < 1:
            raise ValueError("integrator_substeps must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not 0.0 <= self.kappa_default <= 2.0:
            raise ValueError("kappa_default must lie in [0, 2]")
        return self

    @property
    def n_nodes(self) -> int:
        return self.N_p

    def uph_nodes(self, T_u: float) -> int:
        """Convert an uncertainty propagation horizon in seconds to a node count."""
        return int(min(max(round(T_u / self.T_s), 1), self.N_p))

    @property
    def default_uph_nodes(self) -> int:
        return self.uph_nodes(self.T_u_default)


class DisturbanceRanges(BaseModel):
    """Per-component standard deviation ranges [x, y, psi, v_lon, v_lat, psi_dot, delta_f]."""

    sigma_min: List[float] = Field(default_factory=lambda: list(NOMINAL_SIGMA_MIN))
    sigma_max: List[float] = Field(default_factory=lambda: list(NOMINAL_SIGMA_MAX))

    @model_validator(mode="after")
    def check_ranges(self):
        if len(self.sigma_min) != 7 or len(self.sigma_max) != 7:
            raise ValueError("Disturbance ranges need 7 components")
        for lo, hi, name in zip(self.sigma_min, self.sigma_max, DISTURBANCE_COMPONENTS):
            if lo < 0 or hi < lo:
                raise ValueError(f"Invalid range for sigma_{name}: [{lo}, {hi}]")
        return self

    @classmethod
    def nominal(cls) -> "DisturbanceRanges":
        return cls()

    @classmethod
    def widened(cls) -> "DisturbanceRanges":
        sigma_min = list(NOMINAL_SIGMA_MIN)
        sigma_max = list(NOMINAL_SIGMA_MAX)
        # stress overrides v_lon, v_lat, psi_dot only
        sigma_min[3:6] = [0.8, 0.7, 0.05]
        sigma_max[3:6] = [1.5, 1.2, 0.08]
        return cls(sigma_min=sigma_min, sigma_max=sigma_max)

    @classmethod
    def zero(cls) -> "DisturbanceRanges":
        return cls(sigma_min=[0.0] * 7, sigma_max=[0.0] * 7)

    @classmethod
    def for_regime(cls, regime: DisturbanceRegime) -> "DisturbanceRanges":
        if regime == DisturbanceRegime.NONE:
            return cls.zero()
        if regime == DisturbanceRegime.EQ8_STRESS:
            return cls.widened()
        return cls.nominal()

    def midpoints(self) -> List[float]:
        return [0.5 * (lo + hi) for lo, hi in zip(self.sigma_min, self.sigma_max)]


class SimConfig(BaseModel):
    """Closed-loop plant and disturbance scheduling."""

    T_s_sim: float = 0.02
    disturbance_ranges: DisturbanceRanges = Field(default_factory=DisturbanceRanges)
    range_switch_period: float = 30.0
    laps_per_episode: int = 1
    max_episode_steps: int = 20_000
    fallback_jerk: float = 5.0
    seed: int = 0

    @model_validator(mode="after")
    def check_switch_period(self):
        if self.T_s_sim <= 0:
            raise ValueError("T_s_sim must be positive")
        if not _is_integer_ratio(self.range_switch_period, self.T_s_sim):
            raise ValueError("range_switch_period must be an integer multiple of T_s_sim")
        return self

    @property
    def range_switch_steps(self) -> int:
        return int(round(self.range_switch_period / self.T_s_sim))


class PolicyNetSpec(BaseModel):
    """Shared-trunk two-head categorical actor with a value head."""

    obs_dim: int = 47
    hidden_sizes: Tuple[int, ...] = (256, 128)
    n_kappa: int = 21
    n_uph: int = 38
    kappa_step: float = 0.1


class PpoConfig(BaseModel):
    """PPO hyperparameters."""

    learning_rate: float = 7e-4
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    n_steps: int = 512
    epochs: int = 10
    minibatch: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    total_steps: int = 50_000
    checkpoint_every_updates: int = 10
    reward_peak: float = 1.0
    sigma_lat: float = 1.0
    switching_time_factor: float = 0.8


class ExperimentConfig(BaseModel):
    """Complete description of one harness invocation."""

    mode: ExperimentMode = ExperimentMode.EVAL
    track: str = "training"
    eval_tracks: List[str] = Field(default_factory=lambda: ["heldout_a", "heldout_b"])
    vehicle: VehicleParams = Field(default_factory=VehicleParams)
    snmpc: SnmpcConfig = Field(default_factory=SnmpcConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
    ppo: PpoConfig = Field(default_factory=PpoConfig)
    policy: PolicyNetSpec = Field(default_factory=PolicyNetSpec)
    agent_mode: AgentMode = AgentMode.STATIC
    regime: DisturbanceRegime = DisturbanceRegime.TABLE3
    regimes: List[DisturbanceRegime] = Field(default_factory=lambda: list(DisturbanceRegime))
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    duration_s: float = 110.0
    checkpoint: Optional[str] = None
    replay_actions: Optional[str] = None
    out_dir: Optional[str] = None
    a_y_max_track: float = 4.5
    a_x_max_track: float = 3.0
    v_top: float = 37.5

    @model_validator(mode="after")
    def check_consistency(self):
        if not _is_integer_ratio(self.duration_s, self.sim.T_s_sim):
            raise ValueError("duration_s must be an integer multiple of T_s_sim")
        if not _is_integer_ratio(self.snmpc.T_s, self.sim.T_s_sim):
            raise ValueError("SNMPC T_s must be an integer multiple of T_s_sim")
        if self.policy.n_uph != self.snmpc.N_p:
            # UPH head always spans the whole prediction horizon
            self.policy = self.policy.model_copy(update={"n_uph": self.snmpc.N_p})
        return self

    @property
    def duration_steps(self) -> int:
        return int(round(self.duration_s / self.sim.T_s_sim))

    @property
    def switching_steps(self) -> int:
        """Parameter switching period in simulation steps (0.8 T_p rounded to the sim grid)."""
        return max(int(round(self.ppo.switching_time_factor * self.snmpc.T_p / self.sim.T_s_sim)), 1)

    @property
    def substeps_per_node(self) -> int:
        return int(round(self.snmpc.T_s / self.sim.T_s_sim))

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate(json.load(f))

    def to_file(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.model_dump_json(indent=2))


class SnmpcParams(BaseModel):
    """The two parameters adapted online: robustification factor and UPH node count."""

    kappa: float = Field(ge=0.0, le=2.0)
    N_u: int = Field(ge=1)

    model_config = {"frozen": True}

    def check_horizon(self, n_nodes: int) -> "SnmpcParams":
        if self.N_u > n_nodes:
            raise ValueError(f"N_u={self.N_u} exceeds the prediction horizon N_p={n_nodes}")
        return self

    @classmethod
    def static_default(cls, config: SnmpcConfig) -> "SnmpcParams":
        return cls(kappa=config.kappa_default, N_u=config.default_uph_nodes)
