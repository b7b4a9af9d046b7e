"""
Stochastic NMPC controller: sample generation, uncertainty propagation and the OCP
solve for one control step, exposed as separate stages so the closed loop can keep
the measure / sample / reference / schedule / propagate / solve ordering.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from app.core.exceptions import UncertaintyDivergenceError
from app.engines.snmpc.ocp import OcpSolution, build_ocp, shift_warm_start
from app.engines.track.raceline import RacelinePoint
from app.engines.uncertainty.pce import (
    NodeUncertainty,
    PceBasis,
    SamplePack,
    backoffs,
    draw_samples,
    propagate_uncertainty,
)
from app.engines.vehicle.dynamics import NU
from app.models.experiment import SnmpcConfig, SnmpcParams, VehicleParams


@dataclass
class PropagationResult:
    """Backoffs for the next solve plus the node moments they came from."""

    tightenings: np.ndarray
    nodes: List[NodeUncertainty] = field(default_factory=list)
    diverged: bool = False
    divergence_node: int = -1


class SnmpcController:
    """
    One stochastic NMPC instance (owns its OCP workspace and warm start).

    Args:
        config: SNMPC configuration
        vehicle: Prediction model parameters
        rng: Generator used for the germ draws
        shift_fraction: Warm-start shift in nodes per control step
    """

    def __init__(self, config: SnmpcConfig, vehicle: VehicleParams, rng: np.random.Generator, shift_fraction: float = 1.0):
        self.config = config
        self.vehicle = vehicle
        self.rng = rng
        self.shift_fraction = shift_fraction
        self.basis = PceBasis(germ_dim=config.germ_dim, order=config.pce_order)
        self.workspace = build_ocp(config, vehicle)
        self.params = SnmpcParams.static_default(config)
        self.previous: Optional[OcpSolution] = None
        logger.info(
            f"SNMPC controller ready: N_p={config.n_nodes}, n_s={config.n_samples}, "
            f"PCE order {config.pce_order} (L={self.basis.L}), kappa={self.params.kappa}, N_u={self.params.N_u}"
        )

    def set_params(self, params: SnmpcParams):
        """Parameters used from the next propagation/solve on."""
        self.params = params.check_horizon(self.config.n_nodes)

    def reset(self):
        self.previous = None

    def sample(self, measured_state: np.ndarray, sigma: Sequence[float]) -> SamplePack:
        return draw_samples(measured_state, sigma, self.config.n_samples, self.rng, self.basis)

    def warm_start(self, measured_state: np.ndarray) -> Optional[OcpSolution]:
        if self.previous is None:
            return None
        return shift_warm_start(self.previous, self.workspace, measured_state, self.shift_fraction)

    def propagation_controls(self, warm: Optional[OcpSolution]) -> np.ndarray:
        if warm is None:
            return np.zeros((self.config.n_nodes, NU))
        return np.asarray(warm.controls, dtype=float)

    def propagate(self, pack: SamplePack, warm: Optional[OcpSolution]) -> PropagationResult:
        """Node moments along the shifted previous plan and the resulting backoffs."""
        try:
            nodes = propagate_uncertainty(pack, self.propagation_controls(warm), self.params, self.config, self.vehicle)
        except UncertaintyDivergenceError as e:
            logger.warning(f"Uncertainty propagation diverged at node {e.node}: {e}")
            return PropagationResult(np.zeros(self.config.n_nodes), [], True, e.node)
        return PropagationResult(backoffs(nodes, self.params.kappa), nodes)

    def nominal_propagation(self) -> PropagationResult:
        """Zero backoffs at every node (nominal NMPC)."""
        return PropagationResult(np.zeros(self.config.n_nodes))

    def solve(
        self,
        measured_state: np.ndarray,
        refs: Sequence[RacelinePoint],
        propagation: PropagationResult,
        warm: Optional[OcpSolution],
    ) -> OcpSolution:
        ws = self.workspace
        ws.set_problem_data(measured_state, refs, propagation.tightenings, self.params, propagation.diverged)
        solution = ws.solve(warm)
        self.previous = solution
        return solution

    def step(self, measured_state: np.ndarray, sigma: Sequence[float], refs: Sequence[RacelinePoint]) -> OcpSolution:
        """Sample, propagate and solve in one call."""
        pack = self.sample(measured_state, sigma)
        warm = self.warm_start(measured_state)
        propagation = self.propagate(pack, warm)
        return self.solve(measured_state, refs, propagation, warm)
