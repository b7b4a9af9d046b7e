"""Interval reward for the parameter scheduler."""
import math
from typing import Sequence

import numpy as np


def compute_reward(
    e_lat_max: float,
    any_violation: bool,
    infeasible: bool,
    peak: float = 1.0,
    sigma_lat: float = 1.0,
) -> float:
    """
    Reward for one switching interval.

    Infeasibility is checked first and yields -peak; a constraint violation yields 0;
    otherwise the reward decays from peak with the interval's maximum lateral error.

    Args:
        e_lat_max: Maximum |e_lat| over the interval [m], nonnegative
        any_violation: True if the true state violated a constraint in the interval
        infeasible: True if any solve in the interval was infeasible
        peak: Reward scale A
        sigma_lat: Lateral error scale [m]
    """
    if e_lat_max < 0:
        raise ValueError(f"e_lat_max must be nonnegative, got {e_lat_max}")
    if infeasible:
        return -peak
    if any_violation:
        return 0.0
    return peak * math.exp(-e_lat_max / sigma_lat)


def aggregate_interval_error(samples: Sequence[float]) -> float:
    """Maximum absolute lateral deviation over one interval."""
    values = np.asarray(samples, dtype=float)
    if values.size == 0:
        raise ValueError("Interval must contain at least one sample")
    return float(np.max(np.abs(values)))
