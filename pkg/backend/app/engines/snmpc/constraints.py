"""
Combined longitudinal/lateral acceleration constraint h(x) <= 1.

    h = (a_lon / a_x)^2 + (a_lat / a_y_max)^2,   a_lon = a,  a_lat = v_lon * psi_dot

a_x is a_x_max when accelerating and a_x_brake when a_lon < 0.
"""
from typing import Tuple

import numpy as np

from app.engines.vehicle.dynamics import StateIndex
from app.models.experiment import SnmpcConfig


def lateral_acceleration(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    return states[..., StateIndex.V_LON] * states[..., StateIndex.PSI_DOT]


def acceleration_ratio(states: np.ndarray, config: SnmpcConfig) -> np.ndarray:
    """Evaluate h for states of shape (..., 8)."""
    states = np.asarray(states, dtype=float)
    a_lon = states[..., StateIndex.A]
    a_x = np.where(a_lon < 0.0, config.a_x_brake, config.a_x_max)
    return (a_lon / a_x) ** 2 + (lateral_acceleration(states) / config.a_y_max) ** 2


def acceleration_ratio_gradient(states: np.ndarray, config: SnmpcConfig) -> Tuple[np.ndarray, np.ndarray]:
    """h and dh/dx for states of shape (..., 8); returns arrays (...) and (..., 8)."""
    x = np.asarray(states, dtype=float)
    a_lon = x[..., StateIndex.A]
    v_lon = x[..., StateIndex.V_LON]
    yaw_rate = x[..., StateIndex.PSI_DOT]
    a_x = np.where(a_lon < 0.0, config.a_x_brake, config.a_x_max)
    a_y = config.a_y_max

    h = (a_lon / a_x) ** 2 + (v_lon * yaw_rate / a_y) ** 2
    grad = np.zeros(x.shape)
    grad[..., StateIndex.A] = 2.0 * a_lon / a_x ** 2
    grad[..., StateIndex.V_LON] = 2.0 * v_lon * yaw_rate ** 2 / a_y ** 2
    grad[..., StateIndex.PSI_DOT] = 2.0 * v_lon ** 2 * yaw_rate / a_y ** 2
    return h, grad
