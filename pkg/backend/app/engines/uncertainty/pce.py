"""
Non-intrusive polynomial chaos expansion of the predicted states and of the
acceleration constraint.

Samples of the uncertain initial state (v_lon, v_lat, psi_dot) are drawn from a
standard-normal germ, integrated through the prediction model up to the uncertainty
propagation horizon (UPH) and regressed onto an orthonormal multivariate Hermite
basis. c_0 is the mean, the sum of the remaining squared coefficients the variance.
Beyond the UPH the mean is propagated deterministically with zero constraint variance.
"""
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import eval_hermitenorm

from app.core.exceptions import DynamicsDomainError, RankDeficiencyError, UncertaintyDivergenceError
from app.engines.snmpc.constraints import acceleration_ratio
from app.engines.vehicle.dynamics import NX, StateIndex, as_state_array, integrate_interval
from app.models.experiment import SnmpcConfig, SnmpcParams, VehicleParams

# State components perturbed by the germ, in germ order
UNCERTAIN_COMPONENTS = (StateIndex.V_LON, StateIndex.V_LAT, StateIndex.PSI_DOT)
# Their positions inside the 7-component disturbance vector
SIGMA_INDICES = (3, 4, 5)

MAX_CONDITION = 1e10
MAX_REDRAWS = 10

StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
ConstraintFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def kappa_from_p(p: float) -> float:
    """Robustification factor for an admissible violation probability p in (0, 1]."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"Violation probability must lie in (0, 1], got {p}")
    return math.sqrt((1.0 - p) / p)


def robustified_bound(h_mean: float, h_var: float, kappa: float) -> float:
    """E[h] + kappa * sqrt(Var[h]), the quantity constrained to stay <= 1."""
    if h_var < 0 or kappa < 0:
        raise ValueError(f"h_var and kappa must be nonnegative, got {h_var}, {kappa}")
    return h_mean + kappa * math.sqrt(h_var)


def total_degree_indices(germ_dim: int, order: int) -> np.ndarray:
    """Multi-indices with total degree <= order, ordered by degree (constant term first)."""
    alphas = [a for a in itertools.product(range(order + 1), repeat=germ_dim) if sum(a) <= order]
    alphas.sort(key=lambda a: (sum(a), tuple(-v for v in a)))
    return np.array(alphas, dtype=int)


@dataclass(frozen=True)
class PceBasis:
    """Orthonormal probabilists' Hermite basis He_n / sqrt(n!) over a standard-normal germ."""

    germ_dim: int = 3
    order: int = 2
    alphas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.germ_dim < 1 or self.order < 0:
            raise ValueError(f"Invalid PCE basis (germ_dim={self.germ_dim}, order={self.order})")
        object.__setattr__(self, "alphas", total_degree_indices(self.germ_dim, self.order))

    @property
    def L(self) -> int:
        return len(self.alphas)

    def evaluate(self, germ: np.ndarray) -> np.ndarray:
        """
        Basis matrix.

        Args:
            germ: Germ points, shape (n, germ_dim)

        Returns:
            Matrix of shape (n, L)
        """
        germ = np.atleast_2d(np.asarray(germ, dtype=float))
        phi = np.ones((germ.shape[0], self.L))
        for k, alpha in enumerate(self.alphas):
            for j, degree in enumerate(alpha):
                if degree:
                    phi[:, k] *= eval_hermitenorm(degree, germ[:, j]) / math.sqrt(math.factorial(degree))
        return phi


@dataclass(frozen=True)
class SamplePack:
    """Germ points, the resulting initial-state samples and the regression operator."""

    germ_points: np.ndarray
    state_samples: np.ndarray
    regression_pseudoinverse: np.ndarray
    basis_matrix: np.ndarray
    condition_number: float
    basis: PceBasis

    @property
    def n_samples(self) -> int:
        return self.germ_points.shape[0]


@dataclass(frozen=True)
class NodeUncertainty:
    """Mean state and constraint moments at one shooting node."""

    node: int
    mean_state: np.ndarray
    h_mean: float
    h_var: float


def build_sample_pack(measured_state, sigma: Sequence[float], germ_points: np.ndarray, basis: Optional[PceBasis] = None) -> SamplePack:
    """Assemble a SamplePack for given germ points."""
    basis = basis or PceBasis()
    germ_points = np.asarray(germ_points, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (7,):
        raise ValueError(f"Disturbance vector must have 7 components, got shape {sigma.shape}")
    if germ_points.shape[1] != basis.germ_dim:
        raise ValueError(f"Germ points need {basis.germ_dim} columns, got {germ_points.shape[1]}")

    x0 = as_state_array(measured_state).reshape(NX)
    states = np.tile(x0, (germ_points.shape[0], 1))
    for j, (component, sigma_idx) in enumerate(zip(UNCERTAIN_COMPONENTS, SIGMA_INDICES)):
        states[:, component] += germ_points[:, j] * sigma[sigma_idx]

    phi = basis.evaluate(germ_points)
    condition = float(np.linalg.cond(phi))
    pinv = np.linalg.pinv(phi)
    return SamplePack(germ_points, states, pinv, phi, condition, basis)


def draw_samples(measured_state, sigma: Sequence[float], n_s: int, rng: np.random.Generator, basis: Optional[PceBasis] = None) -> SamplePack:
    """
    Draw i.i.d. standard-normal germ points and the perturbed initial states.

    Re-draws when the basis matrix conditioning exceeds the admissible limit.

    Args:
        measured_state: Measured (noisy) initial state
        sigma: Disturbance standard deviations (7 components)
        n_s: Number of samples, at least the number of basis terms
        rng: numpy random generator

    Returns:
        SamplePack
    """
    basis = basis or PceBasis()
    if n_s < basis.L:
        raise ValueError(f"n_s={n_s} smaller than the number of basis terms L={basis.L}")

    for attempt in range(MAX_REDRAWS):
        germ = rng.standard_normal((n_s, basis.germ_dim))
        pack = build_sample_pack(measured_state, sigma, germ, basis)
        if pack.condition_number <= MAX_CONDITION:
            return pack
        logger.debug(f"Germ draw {attempt} ill-conditioned (cond={pack.condition_number:.2e}), re-drawing")
    raise RankDeficiencyError(f"No well-conditioned germ draw after {MAX_REDRAWS} attempts")


def pce_coefficients(sample_values: np.ndarray, pack: SamplePack) -> np.ndarray:
    """
    Least-squares PCE coefficients of sampled values.

    ``sample_values`` may be a vector (n_s,) or a matrix (n_s, m); coefficients are
    returned with shape (L,) or (L, m).
    """
    if pack.condition_number > MAX_CONDITION:
        raise RankDeficiencyError(f"Basis matrix condition {pack.condition_number:.2e} exceeds {MAX_CONDITION:.0e}")
    values = np.asarray(sample_values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("Sample values must be finite")
    return pack.regression_pseudoinverse @ values


def pce_moments(coefficients: np.ndarray):
    """(mean, variance) from PCE coefficients along axis 0."""
    c = np.asarray(coefficients, dtype=float)
    return c[0], np.sum(c[1:] ** 2, axis=0)


def _sample_moments(values: np.ndarray, pack: SamplePack):
    values = np.asarray(values, dtype=float)
    if np.all(values == values[0]):
        # degenerate spread: exact mean, zero variance
        return values[0].copy(), np.zeros_like(values[0])
    return pce_moments(pce_coefficients(values, pack))


def _check_envelope(states: np.ndarray, limit: float, node: int):
    speeds = np.abs(states[..., [StateIndex.V_LON, StateIndex.V_LAT]])
    if not np.all(np.isfinite(states)) or np.any(speeds > limit):
        raise UncertaintyDivergenceError(f"Propagated samples left the {limit:.0f} m/s envelope at node {node}", node=node)


def propagate_uncertainty(
    pack: SamplePack,
    control_seq: np.ndarray,
    params: SnmpcParams,
    config: SnmpcConfig,
    vehicle: Optional[VehicleParams] = None,
    step_fn: Optional[StepFn] = None,
    constraint_fn: Optional[ConstraintFn] = None,
) -> List[NodeUncertainty]:
    """
    Propagate the sample pack over the prediction horizon.

    Nodes t < N_u carry sampled moments; nodes t >= N_u continue from the node
    (N_u - 1) mean deterministically with h_var = 0.

    Args:
        pack: Initial samples and regression operator
        control_seq: Controls, shape (N_p, 2)
        params: kappa / N_u (only N_u is used here)
        config: SNMPC configuration (horizon, limits, divergence envelope)
        vehicle: Model parameters for the default RK4 step
        step_fn: Optional step override mapping (states (n, 8), u (2,)) to next states
        constraint_fn: Optional constraint override mapping (states (n, 8), u) to (n,)

    Returns:
        One NodeUncertainty per shooting node 0..N_p-1
    """
    controls = np.asarray(control_seq, dtype=float)
    n_nodes = config.n_nodes
    if controls.shape != (n_nodes, 2):
        raise ValueError(f"control_seq must have shape ({n_nodes}, 2), got {controls.shape}")
    params.check_horizon(n_nodes)

    if step_fn is None:
        if vehicle is None:
            raise ValueError("vehicle parameters required for the default prediction model")

        def step_fn(states, u):
            return integrate_interval(states, u, config.T_s, vehicle, config.integrator_substeps)

    if constraint_fn is None:
        def constraint_fn(states, u):
            return acceleration_ratio(states, config)

    nodes: List[NodeUncertainty] = []
    samples = pack.state_samples.copy()
    try:
        for t in range(params.N_u):
            _check_envelope(samples, config.divergence_speed, t)
            mean, _ = _sample_moments(samples, pack)
            h_mean, h_var = _sample_moments(constraint_fn(samples, controls[t]), pack)
            nodes.append(NodeUncertainty(t, np.array(mean, dtype=float), float(h_mean), float(max(h_var, 0.0))))
            if t + 1 < params.N_u:
                samples = step_fn(samples, controls[t])

        mean = nodes[-1].mean_state
        for t in range(params.N_u, n_nodes):
            mean = step_fn(mean[None, :], controls[t - 1])[0]
            _check_envelope(mean, config.divergence_speed, t)
            h_mean = float(constraint_fn(mean[None, :], controls[t])[0])
            nodes.append(NodeUncertainty(t, mean.copy(), h_mean, 0.0))
    except DynamicsDomainError as e:
        node = len(nodes)
        raise UncertaintyDivergenceError(f"Sample propagation left the model domain at node {node}: {e}", node=node) from e

    return nodes


def backoffs(nodes: Sequence[NodeUncertainty], kappa: float) -> np.ndarray:
    """Per-node constraint tightening kappa * sqrt(h_var)."""
    return np.array([robustified_bound(0.0, n.h_var, kappa) for n in nodes])


def dump_node_uncertainty(nodes: Sequence[NodeUncertainty], path: str):
    """Write per-node (h_mean, h_var, mean state) rows for variance-growth plots."""
    columns = ["x_pos", "y_pos", "psi", "v_lon", "v_lat", "psi_dot", "delta_f", "a"]
    rows = []
    for n in nodes:
        row = {"node": n.node, "h_mean": n.h_mean, "h_var": n.h_var}
        row.update({f"mean_{c}": float(v) for c, v in zip(columns, n.mean_state)})
        rows.append(row)
    pd.DataFrame(rows, columns=["node", "h_mean", "h_var"] + [f"mean_{c}" for c in columns]).to_csv(path, index=False)
    logger.debug(f"Node uncertainty dumped to {path}")
