"""
Dynamic nonlinear single-track vehicle model.

State  x = [x_pos, y_pos, psi, v_lon, v_lat, psi_dot, delta_f, a]
Input  u = [jerk, omega_f]

Tire forces are linear in the slip angles (cornering stiffness times slip). The model
serves both as the SNMPC prediction model and as the simulation plant. All functions
are pure and accept batches: states of shape (..., 8), inputs of shape (..., 2).
"""
from dataclasses import dataclass, astuple
from enum import IntEnum
from typing import Tuple, Union

import numpy as np

from app.core.exceptions import DynamicsDomainError
from app.models.experiment import VehicleParams

NX = 8
NU = 2


class StateIndex(IntEnum):
    X_POS = 0
    Y_POS = 1
    PSI = 2
    V_LON = 3
    V_LAT = 4
    PSI_DOT = 5
    DELTA_F = 6
    A = 7


class InputIndex(IntEnum):
    JERK = 0
    OMEGA_F = 1


@dataclass(frozen=True)
class VehicleState:
    """Named view of a state vector."""

    x_pos: float
    y_pos: float
    psi: float
    v_lon: float
    v_lat: float = 0.0
    psi_dot: float = 0.0
    delta_f: float = 0.0
    a: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x: np.ndarray) -> "VehicleState":
        return cls(*(float(v) for v in np.asarray(x, dtype=float).reshape(NX)))


@dataclass(frozen=True)
class ControlInput:
    """Named view of an input vector."""

    jerk: float = 0.0
    omega_f: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.jerk, self.omega_f], dtype=float)

    @classmethod
    def from_array(cls, u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=float).reshape(NU)
        return cls(float(u[0]), float(u[1]))


StateLike = Union[VehicleState, np.ndarray]
InputLike = Union[ControlInput, np.ndarray]


def as_state_array(state: StateLike) -> np.ndarray:
    if isinstance(state, VehicleState):
        return state.as_array()
    return np.asarray(state, dtype=float)


def as_input_array(control: InputLike) -> np.ndarray:
    if isinstance(control, ControlInput):
        return control.as_array()
    return np.asarray(control, dtype=float)


def _check_domain(x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise DynamicsDomainError("Non-finite state passed to the single-track model")
    if np.any(x[..., StateIndex.V_LON] < 0.0):
        raise DynamicsDomainError(
            f"Negative longitudinal velocity {np.min(x[..., StateIndex.V_LON]):.3f} m/s; model undefined when reversing"
        )


def _tire_forces(x: np.ndarray, params: VehicleParams):
    """Front/rear lateral forces plus the intermediate terms the Jacobian needs."""
    v_lon = x[..., StateIndex.V_LON]
    v_lat = x[..., StateIndex.V_LAT]
    yaw_rate = x[..., StateIndex.PSI_DOT]
    delta = x[..., StateIndex.DELTA_F]

    # slip-angle denominator, guarded at low speed
    q = np.maximum(v_lon, params.v_lon_min_model)
    theta_f = (v_lat + params.dist_front * yaw_rate) / q
    theta_r = (v_lat - params.dist_rear * yaw_rate) / q
    alpha_f = delta - np.arctan(theta_f)
    alpha_r = -np.arctan(theta_r)
    force_f = params.cornering_stiffness_front * alpha_f
    force_r = params.cornering_stiffness_rear * alpha_r
    return force_f, force_r, q, theta_f, theta_r


def dynamics_rhs(state: StateLike, control: InputLike, params: VehicleParams) -> np.ndarray:
    """
    Continuous-time state derivative.

    Args:
        state: State vector(s), shape (..., 8)
        control: Input vector(s), shape (..., 2), broadcast against state
        params: Vehicle parameters

    Returns:
        State derivative with the shape of ``state``
    """
    x = as_state_array(state)
    u = as_input_array(control)
    _check_domain(x)

    psi = x[..., StateIndex.PSI]
    v_lon = x[..., StateIndex.V_LON]
    v_lat = x[..., StateIndex.V_LAT]
    yaw_rate = x[..., StateIndex.PSI_DOT]
    delta = x[..., StateIndex.DELTA_F]
    acc = x[..., StateIndex.A]

    force_f, force_r, _, _, _ = _tire_forces(x, params)
    cos_psi, sin_psi = np.cos(psi), np.sin(psi)
    cos_delta = np.cos(delta)

    dx = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,)))
    dx[..., StateIndex.X_POS] = v_lon * cos_psi - v_lat * sin_psi
    dx[..., StateIndex.Y_POS] = v_lon * sin_psi + v_lat * cos_psi
    dx[..., StateIndex.PSI] = yaw_rate
    dx[..., StateIndex.V_LON] = acc + v_lat * yaw_rate
    dx[..., StateIndex.V_LAT] = (force_f * cos_delta + force_r) / params.mass - v_lon * yaw_rate
    dx[..., StateIndex.PSI_DOT] = (
        params.dist_front * force_f * cos_delta - params.dist_rear * force_r
    ) / params.yaw_inertia
    dx[..., StateIndex.DELTA_F] = u[..., InputIndex.OMEGA_F]
    dx[..., StateIndex.A] = u[..., InputIndex.JERK]
    return dx


def integrate_step(state: StateLike, control: InputLike, dt: float, params: VehicleParams) -> np.ndarray:
    """One explicit fourth-order Runge-Kutta step with zero-order-hold input."""
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    x = as_state_array(state)
    u = as_input_array(control)
    k1 = dynamics_rhs(x, u, params)
    k2 = dynamics_rhs(x + 0.5 * dt * k1, u, params)
    k3 = dynamics_rhs(x + 0.5 * dt * k2, u, params)
    k4 = dynamics_rhs(x + dt * k3, u, params)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def continuous_jacobians(state: StateLike, control: InputLike, params: VehicleParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic Jacobians A = df/dx and B = df/du.

    Accepts a batch of operating points; returns arrays of shape (..., 8, 8) and (..., 8, 2).
    """
    x = as_state_array(state)
    _check_domain(x)
    batch = x.shape[:-1]
    psi = x[..., StateIndex.PSI]
    v_lon = x[..., StateIndex.V_LON]
    v_lat = x[..., StateIndex.V_LAT]
    yaw_rate = x[..., StateIndex.PSI_DOT]
    delta = x[..., StateIndex.DELTA_F]
    lf, lr = params.dist_front, params.dist_rear
    cf, cr = params.cornering_stiffness_front, params.cornering_stiffness_rear
    mass, inertia = params.mass, params.yaw_inertia

    force_f, force_r, q, theta_f, theta_r = _tire_forces(x, params)
    # the guard freezes the slip denominator below v_lon_min_model
    dq_dvlon = (v_lon > params.v_lon_min_model).astype(float)
    datan_f = 1.0 / (1.0 + theta_f ** 2)
    datan_r = 1.0 / (1.0 + theta_r ** 2)

    dff_dvlon = cf * datan_f * theta_f / q * dq_dvlon
    dff_dvlat = -cf * datan_f / q
    dff_dr = -cf * datan_f * lf / q
    dfr_dvlon = cr * datan_r * theta_r / q * dq_dvlon
    dfr_dvlat = -cr * datan_r / q
    dfr_dr = cr * datan_r * lr / q

    cos_psi, sin_psi = np.cos(psi), np.sin(psi)
    cos_delta, sin_delta = np.cos(delta), np.sin(delta)

    A = np.zeros(batch + (NX, NX))
    A[..., StateIndex.X_POS, StateIndex.PSI] = -v_lon * sin_psi - v_lat * cos_psi
    A[..., StateIndex.X_POS, StateIndex.V_LON] = cos_psi
    A[..., StateIndex.X_POS, StateIndex.V_LAT] = -sin_psi
    A[..., StateIndex.Y_POS, StateIndex.PSI] = v_lon * cos_psi - v_lat * sin_psi
    A[..., StateIndex.Y_POS, StateIndex.V_LON] = sin_psi
    A[..., StateIndex.Y_POS, StateIndex.V_LAT] = cos_psi
    A[..., StateIndex.PSI, StateIndex.PSI_DOT] = 1.0
    A[..., StateIndex.V_LON, StateIndex.V_LAT] = yaw_rate
    A[..., StateIndex.V_LON, StateIndex.PSI_DOT] = v_lat
    A[..., StateIndex.V_LON, StateIndex.A] = 1.0

    A[..., StateIndex.V_LAT, StateIndex.V_LON] = (dff_dvlon * cos_delta + dfr_dvlon) / mass - yaw_rate
    A[..., StateIndex.V_LAT, StateIndex.V_LAT] = (dff_dvlat * cos_delta + dfr_dvlat) / mass
    A[..., StateIndex.V_LAT, StateIndex.PSI_DOT] = (dff_dr * cos_delta + dfr_dr) / mass - v_lon
    A[..., StateIndex.V_LAT, StateIndex.DELTA_F] = (cf * cos_delta - force_f * sin_delta) / mass

    A[..., StateIndex.PSI_DOT, StateIndex.V_LON] = (lf * dff_dvlon * cos_delta - lr * dfr_dvlon) / inertia
    A[..., StateIndex.PSI_DOT, StateIndex.V_LAT] = (lf * dff_dvlat * cos_delta - lr * dfr_dvlat) / inertia
    A[..., StateIndex.PSI_DOT, StateIndex.PSI_DOT] = (lf * dff_dr * cos_delta - lr * dfr_dr) / inertia
    A[..., StateIndex.PSI_DOT, StateIndex.DELTA_F] = lf * (cf * cos_delta - force_f * sin_delta) / inertia

    B = np.zeros(batch + (NX, NU))
    B[..., StateIndex.DELTA_F, InputIndex.OMEGA_F] = 1.0
    B[..., StateIndex.A, InputIndex.JERK] = 1.0
    return A, B


def linearize_fd(state: StateLike, control: InputLike, params: VehicleParams, eps: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """
    Central finite-difference Jacobians of dynamics_rhs.

    The perturbation for each coordinate is eps scaled by max(1, |value|).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_state_array(state).reshape(NX)
    u = as_input_array(control).reshape(NU)

    A = np.zeros((NX, NX))
    for i in range(NX):
        h = eps * max(1.0, abs(x[i]))
        dx = np.zeros(NX)
        dx[i] = h
        A[:, i] = (dynamics_rhs(x + dx, u, params) - dynamics_rhs(x - dx, u, params)) / (2.0 * h)

    B = np.zeros((NX, NU))
    for j in range(NU):
        h = eps * max(1.0, abs(u[j]))
        du = np.zeros(NU)
        du[j] = h
        B[:, j] = (dynamics_rhs(x, u + du, params) - dynamics_rhs(x, u - du, params)) / (2.0 * h)
    return A, B


def rk4_sensitivities(state: np.ndarray, control: np.ndarray, dt: float, params: VehicleParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    RK4 step together with its exact discrete Jacobians.

    Works on batches: states (..., 8) and inputs (..., 2) give Ad (..., 8, 8), Bd (..., 8, 2).

    Returns:
        (x_next, Ad, Bd) with Ad = dx_next/dx and Bd = dx_next/du
    """
    x = as_state_array(state)
    u = np.broadcast_to(as_input_array(control), x.shape[:-1] + (NU,))
    eye = np.broadcast_to(np.eye(NX), x.shape[:-1] + (NX, NX))

    k1 = dynamics_rhs(x, u, params)
    A1, B1 = continuous_jacobians(x, u, params)
    K1x, K1u = A1, B1

    x2 = x + 0.5 * dt * k1
    k2 = dynamics_rhs(x2, u, params)
    A2, B2 = continuous_jacobians(x2, u, params)
    K2x = A2 @ (eye + 0.5 * dt * K1x)
    K2u = A2 @ (0.5 * dt * K1u) + B2

    x3 = x + 0.5 * dt * k2
    k3 = dynamics_rhs(x3, u, params)
    A3, B3 = continuous_jacobians(x3, u, params)
    K3x = A3 @ (eye + 0.5 * dt * K2x)
    K3u = A3 @ (0.5 * dt * K2u) + B3

    x4 = x + dt * k3
    k4 = dynamics_rhs(x4, u, params)
    A4, B4 = continuous_jacobians(x4, u, params)
    K4x = A4 @ (eye + dt * K3x)
    K4u = A4 @ (dt * K3u) + B4

    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Ad = eye + dt / 6.0 * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    Bd = dt / 6.0 * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
    return x_next, Ad, Bd


def integrate_interval(state: StateLike, control: InputLike, dt: float, params: VehicleParams, substeps: int = 1) -> np.ndarray:
    """Integrate over dt with ``substeps`` equal RK4 steps."""
    x = as_state_array(state)
    h = dt / substeps
    for _ in range(substeps):
        x = integrate_step(x, control, h, params)
    return x


def interval_sensitivities(state: np.ndarray, control: np.ndarray, dt: float, params: VehicleParams, substeps: int = 1):
    """Chained RK4 sensitivities over ``substeps`` steps (batched); returns (x_next, Ad, Bd)."""
    x = as_state_array(state)
    h = dt / substeps
    x, Ad, Bd = rk4_sensitivities(x, control, h, params)
    for _ in range(substeps - 1):
        x, A_k, B_k = rk4_sensitivities(x, control, h, params)
        Ad = A_k @ Ad
        Bd = A_k @ Bd + B_k
    return x, Ad, Bd
