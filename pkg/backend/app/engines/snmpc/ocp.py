"""
Deterministic surrogate of the stochastic OCP and its Gauss-Newton SQP solver.

Direct multiple shooting over N_p nodes with RK4 shooting intervals of T_s. Each SQP
iteration linearizes the shooting maps and the acceleration constraint, condenses the
state deviations (including the shooting defects) onto the control deviations and
solves one dense QP with quadprog:

    min  1/2 ||r + J du||^2 + 1/2 (u + du)' R (u + du) + rho_1 * sum(s) + rho_2/2 * ||s||^2
    s.t. |omega_k + d omega_k| <= omega_max                 k = 0..N-1   (hard)
         |delta_k + d delta_k| <= delta_max                 k = 1..N     (hard)
         h_k + grad h_k' dx_k <= 1 - backoff_k + s_k,  s_k >= 0,  k = 1..N

The variance backoffs are fixed before the solve. The slacks are carried as iterate
variables, so the objective (tracking cost plus slack penalties) is exactly the QP model
and the constraint infeasibility (L1 shooting defects plus slacked-constraint excess) is
kept apart from it. A filter line search on the (infeasibility, objective) pair
globalizes the step.
"""
import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import quadprog
from loguru import logger

from app.core.exceptions import ProblemDataError
from app.engines.snmpc.constraints import acceleration_ratio, acceleration_ratio_gradient
from app.engines.track.raceline import RacelinePoint
from app.engines.vehicle.dynamics import (
    NU,
    NX,
    InputIndex,
    StateIndex,
    as_state_array,
    integrate_interval,
    interval_sensitivities,
)
from app.models.enums import SolverStatus
from app.models.experiment import SnmpcConfig, SnmpcParams, VehicleParams

STAGE_OUTPUTS = [StateIndex.X_POS, StateIndex.Y_POS, StateIndex.PSI, StateIndex.V_LON, StateIndex.DELTA_F, StateIndex.A]
TERMINAL_OUTPUTS = [StateIndex.X_POS, StateIndex.Y_POS, StateIndex.PSI, StateIndex.V_LON]

HESSIAN_REGULARIZATION = 1e-9
MERIT_TOLERANCE = 1e-10

# filter line search constants
FILTER_THETA_MARGIN = 1e-5
FILTER_PHI_MARGIN = 1e-5
ARMIJO_FRACTION = 1e-4
THETA_MAX_FACTOR = 1e4


@dataclass(frozen=True)
class OcpSolution:
    """Optimal controls and mean-state trajectory of one solve."""

    controls: np.ndarray
    states: np.ndarray
    status: SolverStatus
    kkt_residual: float
    max_slack: float
    sqp_iters: int = 0
    solve_time_ms: float = 0.0
    cost: float = 0.0

    @property
    def u0(self) -> np.ndarray:
        return self.controls[0].copy()


@dataclass
class SolverRecord:
    """Per-step solver log row."""

    step: int
    status: str
    kkt_residual: float
    max_slack: float
    sqp_iters: int
    solve_time_ms: float

    @classmethod
    def from_solution(cls, step: int, solution: OcpSolution) -> "SolverRecord":
        return cls(
            step=step,
            status=solution.status.value,
            kkt_residual=float(solution.kkt_residual),
            max_slack=float(solution.max_slack),
            sqp_iters=int(solution.sqp_iters),
            solve_time_ms=float(solution.solve_time_ms),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _QpStep:
    du: np.ndarray
    dx: np.ndarray
    slack: np.ndarray  # absolute slacks of the QP solution
    stationarity: float
    slope: float  # directional derivative of the objective along the full step


class OcpWorkspace:
    """
    Multiple-shooting workspace of one controller instance.

    Mutable problem data; not safe to share between threads.
    """

    def __init__(self, config: SnmpcConfig, vehicle: VehicleParams):
        self.config = config
        self.vehicle = vehicle
        self.N = config.n_nodes

        self._w_stage = np.sqrt(np.asarray(config.stage_weights, dtype=float))
        self._w_terminal = np.sqrt(np.asarray(config.terminal_weights, dtype=float))
        self._r_diag = np.tile(np.asarray(config.input_weights, dtype=float), self.N)

        self._x0: Optional[np.ndarray] = None
        self._y_ref = np.zeros((self.N, len(STAGE_OUTPUTS)))
        self._y_ref_terminal = np.zeros(len(TERMINAL_OUTPUTS))
        self._bounds = np.ones(self.N + 1)
        self._params: Optional[SnmpcParams] = None
        self._diverged = False
        self._filter: list = []
        self._theta_max = math.inf

        logger.debug(f"OCP workspace built: N_p={self.N}, T_s={config.T_s}, {2 * self.N} controls, {self.N} slacks")

    # ------------------------------------------------------------------ data

    @property
    def initial_state(self) -> np.ndarray:
        if self._x0 is None:
            raise ProblemDataError("Problem data not set")
        return self._x0.copy()

    @property
    def constraint_bounds(self) -> np.ndarray:
        """Right-hand sides 1 - backoff for nodes 0..N (node 0 is not constrained)."""
        return self._bounds.copy()

    def set_problem_data(
        self,
        initial_mean,
        refs: Sequence[RacelinePoint],
        tightenings: Sequence[float],
        params: SnmpcParams,
        uncertainty_diverged: bool = False,
    ):
        """
        Load the initial mean state, tracking references and per-node backoffs.

        Args:
            initial_mean: Mean initial state (8,)
            refs: N_p reference points, or N_p + 1 including the terminal one
            tightenings: N_p backoffs kappa * sqrt(Var[h]); zero from node N_u on
            params: Active kappa / N_u
            uncertainty_diverged: Sample propagation diverged upstream of this solve
        """
        x0 = as_state_array(initial_mean).reshape(-1)
        if x0.shape != (NX,) or not np.all(np.isfinite(x0)):
            raise ProblemDataError(f"Initial mean must be a finite {NX}-vector")
        if len(refs) not in (self.N, self.N + 1):
            raise ProblemDataError(f"Expected {self.N} or {self.N + 1} reference points, got {len(refs)}")
        tight = np.asarray(tightenings, dtype=float)
        if tight.shape != (self.N,):
            raise ProblemDataError(f"Expected {self.N} tightenings, got shape {tight.shape}")
        if np.any(tight < 0) or not np.all(np.isfinite(tight)):
            raise ProblemDataError("Tightenings must be finite and nonnegative")
        params.check_horizon(self.N)
        if np.any(tight[params.N_u:] != 0.0):
            raise ProblemDataError(f"Nonzero tightening beyond the uncertainty propagation horizon N_u={params.N_u}")

        refs = list(refs)
        if len(refs) == self.N:
            refs.append(refs[-1])

        psi_ref = np.unwrap([p.psi for p in refs])
        psi_ref += 2.0 * math.pi * round((x0[StateIndex.PSI] - psi_ref[0]) / (2.0 * math.pi))

        for k in range(self.N):
            p = refs[k]
            self._y_ref[k] = [p.x, p.y, psi_ref[k], p.v_ref, 0.0, p.a_ref]
        p = refs[self.N]
        self._y_ref_terminal[:] = [p.x, p.y, psi_ref[self.N], p.v_ref]

        self._bounds[:] = 1.0
        self._bounds[: self.N] = 1.0 - tight
        self._x0 = x0.copy()
        self._params = params
        self._diverged = uncertainty_diverged

    # ------------------------------------------------------------- evaluation

    def rollout(self, controls: np.ndarray, x0: Optional[np.ndarray] = None) -> np.ndarray:
        """Single-shooting state trajectory (N+1, 8) for a control sequence."""
        controls = np.asarray(controls, dtype=float)
        states = np.empty((self.N + 1, NX))
        states[0] = self.initial_state if x0 is None else x0
        for k in range(self.N):
            states[k + 1] = integrate_interval(states[k], controls[k], self.config.T_s, self.vehicle, self.config.integrator_substeps)
        return states

    def cost(self, states: np.ndarray, controls: np.ndarray) -> float:
        """Least-squares tracking cost of a (states, controls) pair."""
        stage = (states[: self.N][:, STAGE_OUTPUTS] - self._y_ref) * self._w_stage
        terminal = (states[self.N, TERMINAL_OUTPUTS] - self._y_ref_terminal) * self._w_terminal
        inputs = np.asarray(controls, dtype=float).reshape(-1)
        return float(0.5 * (np.sum(stage ** 2) + np.sum(terminal ** 2) + np.sum(self._r_diag * inputs ** 2)))

    def constraint_violation(self, states: np.ndarray) -> np.ndarray:
        """max(0, h_k - bound_k) for nodes 1..N."""
        h = acceleration_ratio(states[1:], self.config)
        return np.maximum(h - self._bounds[1:], 0.0)

    def defects(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """Shooting gaps F(x_k, u_k) - x_{k+1}, shape (N, 8)."""
        predicted = integrate_interval(states[:-1], controls, self.config.T_s, self.vehicle, self.config.integrator_substeps)
        return predicted - states[1:]

    def _hard_bound_violation(self, states: np.ndarray, controls: np.ndarray) -> float:
        omega = np.abs(controls[:, InputIndex.OMEGA_F]) - self.config.omega_max
        delta = np.abs(states[1:, StateIndex.DELTA_F]) - self.config.delta_max
        return float(max(np.max(omega), np.max(delta), 0.0))

    def _infeasibility(self, states: np.ndarray, controls: np.ndarray, slack: np.ndarray) -> float:
        """L1 norm of the shooting defects and of the slacked-constraint excess."""
        excess = self.constraint_violation(states) - slack
        return float(np.sum(np.abs(self.defects(states, controls))) + np.sum(np.maximum(excess, 0.0)))

    def _objective(self, states: np.ndarray, controls: np.ndarray, slack: np.ndarray) -> float:
        cfg = self.config
        return self.cost(states, controls) + cfg.slack_penalty * float(np.sum(slack)) + 0.5 * cfg.slack_l2_penalty * float(np.sum(slack ** 2))

    def _objective_slope(self, states, controls, slack, dx, du, slack_step) -> float:
        stage = (states[: self.N][:, STAGE_OUTPUTS] - self._y_ref) * self._w_stage ** 2
        terminal = (states[self.N, TERMINAL_OUTPUTS] - self._y_ref_terminal) * self._w_terminal ** 2
        slope = np.sum(stage * dx[: self.N][:, STAGE_OUTPUTS]) + np.dot(terminal, dx[self.N, TERMINAL_OUTPUTS])
        slope += np.dot(self._r_diag * controls.reshape(-1), du.reshape(-1))
        slope += np.sum((self.config.slack_penalty + self.config.slack_l2_penalty * slack) * slack_step)
        return float(slope)

    # -------------------------------------------------------------------- QP

    def _condense(self, Ad: np.ndarray, Bd: np.ndarray, defects: np.ndarray):
        """dx_k = G_k du + g_k for k = 0..N."""
        n_u = NU * self.N
        G = np.zeros((self.N + 1, NX, n_u))
        g = np.zeros((self.N + 1, NX))
        for k in range(self.N):
            G[k + 1] = Ad[k] @ G[k]
            G[k + 1][:, NU * k: NU * (k + 1)] += Bd[k]
            g[k + 1] = Ad[k] @ g[k] + defects[k]
        return G, g

    def _qp_step(self, states: np.ndarray, controls: np.ndarray, slack: Optional[np.ndarray] = None) -> _QpStep:
        cfg = self.config
        if slack is None:
            slack = self.constraint_violation(states)
        N = self.N
        n_u = NU * N

        predicted, Ad, Bd = interval_sensitivities(states[:-1], controls, cfg.T_s, self.vehicle, cfg.integrator_substeps)
        G, g = self._condense(Ad, Bd, predicted - states[1:])

        # tracking residuals of nodes 1..N-1 and the terminal node
        J_stage = (G[1:N][:, STAGE_OUTPUTS, :] * self._w_stage[None, :, None]).reshape(-1, n_u)
        r_stage = ((states[1:N][:, STAGE_OUTPUTS] + g[1:N][:, STAGE_OUTPUTS] - self._y_ref[1:]) * self._w_stage).reshape(-1)
        J_term = G[N][TERMINAL_OUTPUTS, :] * self._w_terminal[:, None]
        r_term = (states[N, TERMINAL_OUTPUTS] + g[N, TERMINAL_OUTPUTS] - self._y_ref_terminal) * self._w_terminal
        J = np.vstack([J_stage, J_term])
        r = np.concatenate([r_stage, r_term])

        u_flat = controls.reshape(-1)
        H_uu = J.T @ J + np.diag(self._r_diag + HESSIAN_REGULARIZATION)
        H_uu = 0.5 * (H_uu + H_uu.T)
        f_u = J.T @ r + self._r_diag * u_flat

        H = np.zeros((n_u + N, n_u + N))
        H[:n_u, :n_u] = H_uu
        H[n_u:, n_u:] = np.eye(N) * max(cfg.slack_l2_penalty, HESSIAN_REGULARIZATION)
        f = np.concatenate([f_u, np.full(N, cfg.slack_penalty)])

        # inequalities A z <= c
        omega_sel = np.zeros((N, n_u + N))
        omega_sel[np.arange(N), NU * np.arange(N) + InputIndex.OMEGA_F] = 1.0
        omega = controls[:, InputIndex.OMEGA_F]

        delta_rows = np.zeros((N, n_u + N))
        delta_rows[:, :n_u] = G[1:, StateIndex.DELTA_F, :]
        delta = states[1:, StateIndex.DELTA_F] + g[1:, StateIndex.DELTA_F]

        h, grad = acceleration_ratio_gradient(states[1:], cfg)
        h_rows = np.zeros((N, n_u + N))
        h_rows[:, :n_u] = np.einsum("ki,kij->kj", grad, G[1:])
        h_rows[:, n_u:] = -np.eye(N)
        h_rhs = self._bounds[1:] - h - np.sum(grad * g[1:], axis=1)

        slack_rows = np.zeros((N, n_u + N))
        slack_rows[:, n_u:] = -np.eye(N)

        A_ineq = np.vstack([omega_sel, -omega_sel, delta_rows, -delta_rows, h_rows, slack_rows])
        c_ineq = np.concatenate([
            cfg.omega_max - omega,
            cfg.omega_max + omega,
            cfg.delta_max - delta,
            cfg.delta_max + delta,
            h_rhs,
            np.zeros(N),
        ])

        z = quadprog.solve_qp(H, -f, -A_ineq.T, -c_ineq, 0)[0]
        du = z[:n_u].reshape(N, NU)
        dx = np.einsum("kij,j->ki", G, z[:n_u]) + g
        qp_slack = np.maximum(z[n_u:], 0.0)
        stationarity = float(np.max(np.abs(H_uu @ z[:n_u]))) if n_u else 0.0
        slope = self._objective_slope(states, controls, slack, dx, du, qp_slack - slack)
        return _QpStep(du=du, dx=dx, slack=qp_slack, stationarity=stationarity, slope=slope)

    def _primal_residual(self, states: np.ndarray, controls: np.ndarray) -> float:
        defect = float(np.max(np.abs(self.defects(states, controls))))
        initial = float(np.max(np.abs(states[0] - self._x0)))
        return max(defect, initial, self._hard_bound_violation(states, controls))

    # ----------------------------------------------------------------- solve

    def kkt_residual(self, candidate: OcpSolution) -> float:
        """Max-norm of stationarity and primal feasibility residuals at a candidate."""
        states = np.asarray(candidate.states, dtype=float)
        controls = np.asarray(candidate.controls, dtype=float)
        if states.shape != (self.N + 1, NX) or controls.shape != (self.N, NU):
            raise ProblemDataError("Candidate solution has wrong dimensions")
        try:
            step = self._qp_step(states, controls)
        except ValueError:
            return math.inf
        return max(step.stationarity, self._primal_residual(states, controls))

    def _initial_iterate(self, warm_start: Optional[OcpSolution]):
        if warm_start is None:
            controls = np.zeros((self.N, NU))
            return self.rollout(controls), controls
        controls = np.array(warm_start.controls, dtype=float)
        states = np.array(warm_start.states, dtype=float)
        if controls.shape != (self.N, NU) or states.shape != (self.N + 1, NX):
            raise ProblemDataError("Warm start has wrong dimensions")
        controls[:, InputIndex.OMEGA_F] = np.clip(controls[:, InputIndex.OMEGA_F], -self.config.omega_max, self.config.omega_max)
        states[0] = self._x0
        return states, controls

    def _acceptable(self, theta: float, phi: float, theta0: float, phi0: float, alpha: float, slope: float) -> bool:
        if not (math.isfinite(theta) and math.isfinite(phi)) or theta > self._theta_max:
            return False
        tol = MERIT_TOLERANCE * max(1.0, abs(phi0))
        if any(theta >= t and phi >= p - tol for t, p in self._filter):
            return False
        # objective-type step: sufficient predicted decrease dominates the infeasibility
        if slope < 0.0 and alpha * -slope > theta0:
            return phi <= phi0 + ARMIJO_FRACTION * alpha * slope + tol
        accepted = theta <= (1.0 - FILTER_THETA_MARGIN) * theta0 or phi <= phi0 - FILTER_PHI_MARGIN * theta0 + tol
        if accepted:
            self._filter.append(((1.0 - FILTER_THETA_MARGIN) * theta0, phi0 - FILTER_PHI_MARGIN * theta0))
        return accepted

    def _line_search(self, states, controls, slack, step: _QpStep):
        theta0 = self._infeasibility(states, controls, slack)
        phi0 = self._objective(states, controls, slack)
        slack_step = step.slack - slack
        alpha = 1.0
        for _ in range(self.config.line_search_max_steps):
            trial = (states + alpha * step.dx, controls + alpha * step.du, slack + alpha * slack_step)
            try:
                theta, phi = self._infeasibility(*trial), self._objective(*trial)
            except ValueError:
                theta = phi = math.inf
            if self._acceptable(theta, phi, theta0, phi0, alpha, step.slope):
                return trial
            alpha *= self.config.line_search_beta
        logger.debug(f"Line search exhausted, taking step alpha={alpha:.2e}")
        return states + alpha * step.dx, controls + alpha * step.du, slack + alpha * slack_step

    def solve(self, warm_start: Optional[OcpSolution] = None) -> OcpSolution:
        """
        Run the Gauss-Newton SQP from the warm start (or from zero controls).

        Never raises for infeasibility; the outcome is reported in the status.
        """
        if self._x0 is None:
            raise ProblemDataError("set_problem_data must be called before solve")
        t_start = time.perf_counter()
        states, controls = self._initial_iterate(warm_start)
        slack = self.constraint_violation(states)
        self._filter = []
        try:
            self._theta_max = THETA_MAX_FACTOR * max(1.0, self._infeasibility(states, controls, slack))
        except ValueError:
            self._theta_max = math.inf

        converged = False
        qp_failed = False
        kkt = math.inf
        iters = 0
        for iters in range(1, self.config.sqp_max_iters + 1):
            try:
                step = self._qp_step(states, controls, slack)
            except ValueError as e:
                logger.debug(f"QP failed at SQP iteration {iters}: {e}")
                qp_failed = True
                break
            kkt = max(step.stationarity, self._primal_residual(states, controls))
            if kkt <= self.config.qp_tolerance:
                converged = True
                break
            states, controls, slack = self._line_search(states, controls, slack, step)

        if not converged and not qp_failed:
            kkt = self.kkt_residual(OcpSolution(controls, states, SolverStatus.MAX_ITERATIONS, math.inf, 0.0))

        violation = self.constraint_violation(states)
        max_slack = float(np.max(violation)) if violation.size else 0.0
        if self._diverged or max_slack > self.config.infeasibility_slack:
            status = SolverStatus.INFEASIBLE
        elif converged:
            status = SolverStatus.SOLVED
        else:
            status = SolverStatus.MAX_ITERATIONS

        return OcpSolution(
            controls=controls,
            states=states,
            status=status,
            kkt_residual=float(kkt),
            max_slack=max_slack,
            sqp_iters=iters,
            solve_time_ms=1000.0 * (time.perf_counter() - t_start),
            cost=self.cost(states, controls),
        )


def build_ocp(config: SnmpcConfig, vehicle: VehicleParams) -> OcpWorkspace:
    """Allocate a multiple-shooting workspace for the given configuration."""
    return OcpWorkspace(config, vehicle)


def shift_warm_start(
    prev: OcpSolution,
    workspace: OcpWorkspace,
    initial_mean=None,
    fraction: float = 1.0,
) -> OcpSolution:
    """
    Shift a solution forward in time for warm starting.

    fraction = 1 drops the first node and repeats the last control; smaller
    fractions interpolate the piecewise-constant sequence (sub-node shifts when the
    controller runs faster than the node spacing). States are re-rolled from
    initial_mean (default: the previous node-1 state).
    """
    controls = np.asarray(prev.controls, dtype=float)
    n = controls.shape[0]
    if fraction == 1.0:
        shifted = np.vstack([controls[1:], controls[-1:]])
    else:
        query = np.minimum(np.arange(n) + fraction, n - 1)
        shifted = np.column_stack([np.interp(query, np.arange(n), controls[:, j]) for j in range(NU)])
    x0 = prev.states[1] if initial_mean is None else as_state_array(initial_mean)
    states = workspace.rollout(shifted, x0=x0)
    return replace(prev, controls=shifted, states=states, sqp_iters=0, solve_time_ms=0.0)
