"""
Agent observation and action encoding.

The observation never contains world-frame coordinates: kinematics are body-frame
quantities and the future reference is expressed relative to the ego pose.

Layout (47 components):
    [0:5]    v_lon, v_lat, psi_dot, delta_f, a
    [5:7]    previous kappa, previous N_u / N_p
    [7:10]   e_lat max of the last interval, violation flag, infeasibility flag
    [10:17]  disturbance assumption sigma
    [17:47]  10 reference points x (x_local, y_local, v_ref)
"""
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from app.engines.track.raceline import Raceline, reference_window, to_ego_frame
from app.engines.vehicle.dynamics import StateIndex
from app.models.experiment import PolicyNetSpec, SnmpcConfig, SnmpcParams

N_REF_POINTS = 10
OBS_DIM = 5 + 2 + 3 + 7 + 3 * N_REF_POINTS

KINEMATIC_COMPONENTS = (StateIndex.V_LON, StateIndex.V_LAT, StateIndex.PSI_DOT, StateIndex.DELTA_F, StateIndex.A)


@dataclass(frozen=True)
class ObservationScales:
    """Fixed normalization scales; stored with checkpoints so evaluation sees the training scaling."""

    kinematics: Tuple[float, ...] = (40.0, 5.0, 1.0, 0.61, 5.0)
    kappa: float = 2.0
    e_lat: float = 2.0
    sigma_max: Tuple[float, ...] = (0.3, 0.3, 0.017, 1.0, 1.0, 0.08, 0.0017)
    position: float = 120.0
    speed: float = 40.0

    @classmethod
    def from_ranges(cls, sigma_max: Sequence[float]) -> "ObservationScales":
        # zero-width components (regime "none") keep unit scale
        return cls(sigma_max=tuple(float(v) if v > 0 else 1.0 for v in sigma_max))

    def to_dict(self) -> Dict[str, object]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ObservationScales":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class IntervalPerformance:
    """Outcome of the most recent switching interval."""

    e_lat_max: float = 0.0
    violated: bool = False
    infeasible: bool = False


@dataclass(frozen=True)
class PolicyAction:
    """Index pair selected by the two categorical heads."""

    kappa_index: int
    uph_index: int

    def decode(self, spec: PolicyNetSpec) -> SnmpcParams:
        if not 0 <= self.kappa_index < spec.n_kappa:
            raise ValueError(f"kappa_index {self.kappa_index} outside [0, {spec.n_kappa - 1}]")
        if not 0 <= self.uph_index < spec.n_uph:
            raise ValueError(f"uph_index {self.uph_index} outside [0, {spec.n_uph - 1}]")
        return SnmpcParams(kappa=round(spec.kappa_step * self.kappa_index, 10), N_u=self.uph_index + 1)

    @classmethod
    def encode(cls, params: SnmpcParams, spec: PolicyNetSpec) -> "PolicyAction":
        """Nearest grid action for arbitrary parameters."""
        kappa_index = int(np.clip(round(params.kappa / spec.kappa_step), 0, spec.n_kappa - 1))
        uph_index = int(np.clip(params.N_u - 1, 0, spec.n_uph - 1))
        return cls(kappa_index, uph_index)


def reference_points_ego(
    raceline: Raceline,
    s: float,
    ego_pose: Tuple[float, float, float],
    v_current: float,
    config: SnmpcConfig,
    n_points: int = N_REF_POINTS,
) -> np.ndarray:
    """Reference sampled uniformly over [0, T_p], as (x_local, y_local, v_ref) rows."""
    times = np.linspace(0.0, config.T_p, n_points)
    window = reference_window(raceline, s, times, v_current, a_max=config.a_x_max)
    return to_ego_frame(window, ego_pose)


def build_observation(
    state: np.ndarray,
    prev: SnmpcParams,
    perf: IntervalPerformance,
    refs_ego: np.ndarray,
    sigma: Sequence[float],
    n_nodes: int,
    scales: ObservationScales = ObservationScales(),
) -> np.ndarray:
    """
    Normalized observation vector.

    Args:
        state: Measured vehicle state (8,); only body-frame components are read
        prev: Parameters applied during the last interval
        perf: Last interval performance
        refs_ego: Reference points in the ego frame, shape (10, 3)
        sigma: Disturbance standard deviations assumed by the controller (7,)
        n_nodes: Prediction horizon length N_p
        scales: Normalization scales

    Returns:
        Float vector of length 47
    """
    state = np.asarray(state, dtype=float)
    refs_ego = np.asarray(refs_ego, dtype=float)
    if refs_ego.shape != (N_REF_POINTS, 3):
        raise ValueError(f"refs_ego must have shape ({N_REF_POINTS}, 3), got {refs_ego.shape}")

    kinematics = state[list(KINEMATIC_COMPONENTS)] / np.asarray(scales.kinematics)
    previous = np.array([prev.kappa / scales.kappa, prev.N_u / n_nodes])
    performance = np.array([
        min(perf.e_lat_max / scales.e_lat, 1.0),
        float(perf.violated),
        float(perf.infeasible),
    ])
    disturbance = np.asarray(sigma, dtype=float) / np.asarray(scales.sigma_max)
    reference = refs_ego / np.array([scales.position, scales.position, scales.speed])

    obs = np.concatenate([kinematics, previous, performance, disturbance, reference.ravel()])
    return np.nan_to_num(obs, nan=0.0, posinf=1.0, neginf=-1.0)

