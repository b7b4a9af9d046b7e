"""
Synthetic raceline generation and arc-length geometry.

A track is a chain of straight and circular-arc segments. The centerline is
evaluated analytically per segment, sampled at ~1 m for the velocity profile and
export, and projected onto exactly (no chord approximation) for lateral errors.
"""
import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from app.core.exceptions import TrackSpecError

SAMPLE_SPACING = 1.0
CLOSURE_TOLERANCE = 1e-6
INITIAL_WINDOW = 25.0


class SegmentType(str, enum.Enum):
    """Centerline segment primitives."""
    STRAIGHT = "straight"
    ARC = "arc"


class TrackSegment(BaseModel):
    """One segment; positive radius turns left, negative turns right."""

    type: SegmentType
    length_m: float
    radius_m: Optional[float] = None

    @model_validator(mode="after")
    def check_segment(self):
        if not (math.isfinite(self.length_m) and self.length_m > 0):
            raise TrackSpecError(f"Segment length must be positive and finite, got {self.length_m}")
        if self.type == SegmentType.ARC:
            if self.radius_m is None or not math.isfinite(self.radius_m) or self.radius_m == 0:
                raise TrackSpecError(f"Arc segment needs a finite nonzero radius, got {self.radius_m}")
        return self

    @property
    def curvature(self) -> float:
        if self.type == SegmentType.STRAIGHT:
            return 0.0
        return 1.0 / self.radius_m


class TrackSpec(BaseModel):
    """Track description as stored in ``<name>_track.json``."""

    name: str = "track"
    closed: bool = True
    segments: List[TrackSegment] = Field(min_length=1)
    start_pose: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    v_top: float = 37.5


@dataclass(frozen=True)
class RacelinePoint:
    """Reference sample along the raceline."""

    s: float
    x: float
    y: float
    psi: float
    v_ref: float
    curvature: float
    a_ref: float = 0.0


@dataclass(frozen=True)
class _SegmentGeometry:
    s_start: float
    length: float
    x0: float
    y0: float
    psi0: float
    curvature: float

    @property
    def s_end(self) -> float:
        return self.s_start + self.length

    def pose(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pose at local arc length t (0 <= t <= length)."""
        t = np.asarray(t, dtype=float)
        k = self.curvature
        psi = self.psi0 + k * t
        if k == 0.0:
            return self.x0 + t * math.cos(self.psi0), self.y0 + t * math.sin(self.psi0), psi
        x = self.x0 + (np.sin(psi) - math.sin(self.psi0)) / k
        y = self.y0 - (np.cos(psi) - math.cos(self.psi0)) / k
        return x, y, psi

    def end_pose(self) -> Tuple[float, float, float]:
        x, y, psi = self.pose(np.array(self.length))
        return float(x), float(y), float(psi)

    def project(self, px: float, py: float) -> Tuple[float, float, bool]:
        """
        Exact nearest point on this segment.

        Returns:
            (local arc length t, distance, clamped-to-an-end flag)
        """
        k = self.curvature
        if k == 0.0:
            tx, ty = math.cos(self.psi0), math.sin(self.psi0)
            t_free = (px - self.x0) * tx + (py - self.y0) * ty
            t = min(max(t_free, 0.0), self.length)
        else:
            radius = 1.0 / abs(k)
            cx = self.x0 - math.sin(self.psi0) / k
            cy = self.y0 + math.cos(self.psi0) / k
            phi0 = math.atan2(self.y0 - cy, self.x0 - cx)
            phi_p = math.atan2(py - cy, px - cx)
            swept = (math.copysign(1.0, k) * (phi_p - phi0)) % (2.0 * math.pi)
            sweep_max = self.length / radius
            if swept <= sweep_max:
                t_free = t = swept * radius
            else:
                # beyond the end; pick the closer end in angle
                past_end = swept - sweep_max
                before_start = 2.0 * math.pi - swept
                t_free = self.length + past_end * radius if past_end < before_start else -before_start * radius
                t = self.length if past_end < before_start else 0.0
        fx, fy, _ = self.pose(np.array(t))
        dist = math.hypot(px - float(fx), py - float(fy))
        return t, dist, t != t_free


@dataclass(frozen=True)
class Raceline:
    """Immutable sampled raceline with analytic segment geometry."""

    name: str
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v_ref: np.ndarray
    curvature: np.ndarray
    a_ref: np.ndarray
    closed: bool
    total_length: float
    segments: Tuple[_SegmentGeometry, ...] = field(repr=False)

    @property
    def points(self) -> List[RacelinePoint]:
        return [
            RacelinePoint(float(s), float(x), float(y), float(p), float(v), float(k), float(a))
            for s, x, y, p, v, k, a in zip(self.s, self.x, self.y, self.psi, self.v_ref, self.curvature, self.a_ref)
        ]

    def __len__(self) -> int:
        return len(self.s)

    def wrap_s(self, s: float) -> float:
        if self.closed:
            return float(s % self.total_length)
        return float(min(max(s, 0.0), self.total_length))

    def _segment_index(self, s: float) -> int:
        starts = [seg.s_start for seg in self.segments]
        return max(int(np.searchsorted(starts, s, side="right")) - 1, 0)

    def point_at(self, s: float) -> RacelinePoint:
        """Raceline sample at arbitrary arc length (wrapped on closed tracks)."""
        s = self.wrap_s(s)
        seg = self.segments[self._segment_index(s)]
        t = min(max(s - seg.s_start, 0.0), seg.length)
        x, y, psi = seg.pose(np.array(t))
        return RacelinePoint(
            s=s,
            x=float(x),
            y=float(y),
            psi=float(psi),
            v_ref=self.speed_at(s),
            curvature=seg.curvature,
            a_ref=float(np.interp(s, self.s, self.a_ref)),
        )

    def speed_at(self, s: float) -> float:
        return float(np.interp(self.wrap_s(s), self.s, self.v_ref))

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            "s": self.s,
            "x": self.x,
            "y": self.y,
            "psi": self.psi,
            "v_ref": self.v_ref,
            "curvature": self.curvature,
        })

    def export_csv(self, path: str):
        """Write (s, x, y, psi, v_ref, curvature) rows."""
        self.to_dataframe().to_csv(path, index=False)
        logger.info(f"Raceline '{self.name}' exported to {path}")


def _chain_segments(spec: TrackSpec) -> List[_SegmentGeometry]:
    x, y, psi = spec.start_pose
    s = 0.0
    chain = []
    for segment in spec.segments:
        geom = _SegmentGeometry(s, segment.length_m, x, y, psi, segment.curvature)
        chain.append(geom)
        x, y, psi = geom.end_pose()
        s += segment.length_m
    return chain


def _max_entry_speed(v_next: float, curvature: float, ds: float, a_y_max: float, a_x_max: float, v_cap: float) -> float:
    """Largest v at a point such that braking to v_next over ds stays inside the acceleration ellipse."""
    def inside(v: float) -> bool:
        a_lon = (v * v - v_next * v_next) / (2.0 * ds)
        a_lat = v * v * abs(curvature)
        return (a_lon / a_x_max) ** 2 + (a_lat / a_y_max) ** 2 <= 1.0

    if v_cap <= v_next or inside(v_cap):
        return v_cap
    lo, hi = v_next, v_cap
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _velocity_profile(curvature: np.ndarray, ds: float, v_top: float, a_y_max: float, a_x_max: float) -> np.ndarray:
    abs_k = np.abs(curvature)
    with np.errstate(divide="ignore"):
        v = np.where(abs_k > 0, np.sqrt(a_y_max / np.maximum(abs_k, 1e-300)), v_top)
    v = np.minimum(v, v_top)
    n = len(v)

    # backward pass: braking into slower sections
    for i in range(n - 2, -1, -1):
        if v[i] > v[i + 1]:
            v[i] = _max_entry_speed(v[i + 1], curvature[i], ds, a_y_max, a_x_max, v[i])

    # forward pass: acceleration with the lateral load of the current point
    for i in range(n - 1):
        lat_ratio = min((v[i] ** 2 * abs_k[i]) / a_y_max, 1.0)
        a_avail = a_x_max * math.sqrt(max(0.0, 1.0 - lat_ratio ** 2))
        v[i + 1] = min(v[i + 1], math.sqrt(v[i] ** 2 + 2.0 * a_avail * ds))
    return v


def generate_track(spec: TrackSpec, a_y_max: float, a_x_max: float) -> Raceline:
    """
    Build a sampled raceline with a lateral/longitudinal-limited velocity profile.

    Args:
        spec: Segment chain
        a_y_max: Lateral acceleration used for the curve speed cap
        a_x_max: Longitudinal acceleration limit of the forward/backward passes

    Returns:
        Raceline sampled at ~1 m spacing
    """
    if a_y_max <= 0 or a_x_max <= 0:
        raise TrackSpecError("Acceleration limits must be positive")
    if not 0 < spec.v_top:
        raise TrackSpecError("v_top must be positive")

    chain = _chain_segments(spec)
    total_length = chain[-1].s_end
    end_x, end_y, end_psi = chain[-1].end_pose()
    x0, y0, psi0 = spec.start_pose

    if spec.closed:
        heading_gap = abs(math.remainder(end_psi - psi0, 2.0 * math.pi))
        if math.hypot(end_x - x0, end_y - y0) > CLOSURE_TOLERANCE or heading_gap > CLOSURE_TOLERANCE:
            raise TrackSpecError(
                f"Track '{spec.name}' flagged closed but ends at ({end_x:.6f}, {end_y:.6f}, {end_psi:.6f}) "
                f"instead of the start pose"
            )

    n_intervals = max(int(math.ceil(total_length / SAMPLE_SPACING - 1e-9)), 1)
    ds = total_length / n_intervals
    s = np.linspace(0.0, total_length, n_intervals + 1)

    xs = np.empty_like(s)
    ys = np.empty_like(s)
    psis = np.empty_like(s)
    curvature = np.empty_like(s)
    starts = np.array([seg.s_start for seg in chain])
    seg_idx = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(chain) - 1)
    for j, seg in enumerate(chain):
        mask = seg_idx == j
        t = np.clip(s[mask] - seg.s_start, 0.0, seg.length)
        xs[mask], ys[mask], psis[mask] = seg.pose(t)
        curvature[mask] = seg.curvature

    if spec.closed:
        # periodic profile: solve over three laps, keep the middle one
        n = n_intervals
        tiled = np.tile(curvature[:n], 3)
        v_mid = _velocity_profile(tiled, ds, spec.v_top, a_y_max, a_x_max)[n:2 * n]
        v_ref = np.append(v_mid, v_mid[0])
        xs[-1], ys[-1] = xs[0], ys[0]
    else:
        v_ref = _velocity_profile(curvature, ds, spec.v_top, a_y_max, a_x_max)

    a_ref = np.zeros_like(v_ref)
    a_ref[:-1] = (v_ref[1:] ** 2 - v_ref[:-1] ** 2) / (2.0 * ds)
    if spec.closed:
        a_ref[-1] = a_ref[0]

    logger.info(
        f"Generated track '{spec.name}': length {total_length:.1f} m, {len(s)} samples, "
        f"v_ref in [{v_ref.min():.2f}, {v_ref.max():.2f}] m/s"
    )
    return Raceline(
        name=spec.name,
        s=s,
        x=xs,
        y=ys,
        psi=psis,
        v_ref=v_ref,
        curvature=curvature,
        a_ref=a_ref,
        closed=spec.closed,
        total_length=total_length,
        segments=tuple(chain),
    )


def project(raceline: Raceline, x: float, y: float, s_hint: float) -> Tuple[float, float]:
    """
    Locally nearest raceline point to (x, y) around s_hint.

    Returns:
        (s, signed lateral error), positive to the left of the path tangent
    """
    segments = raceline.segments
    n_seg = len(segments)
    s_hint = raceline.wrap_s(s_hint)

    lo = raceline._segment_index(raceline.wrap_s(s_hint - INITIAL_WINDOW))
    hi = raceline._segment_index(raceline.wrap_s(s_hint + INITIAL_WINDOW))
    if raceline.closed:
        candidates = [lo] if lo == hi else [(lo + k) % n_seg for k in range((hi - lo) % n_seg + 1)]
    else:
        candidates = list(range(lo, hi + 1))

    best = None
    for _ in range(n_seg + 1):
        results = []
        for idx in candidates:
            t, dist, clamped = segments[idx].project(x, y)
            results.append((dist, idx, t, clamped))
        best = min(results, key=lambda r: r[0])
        dist, idx, t, clamped = best
        if not clamped or len(candidates) >= n_seg:
            break
        seg = segments[idx]
        # widen toward the side where the minimum sits on the window edge
        at_start = t <= 0.0
        if at_start and idx == candidates[0]:
            new = (idx - 1) % n_seg if raceline.closed else idx - 1
            if new < 0 or new in candidates:
                break
            candidates.insert(0, new)
        elif not at_start and idx == candidates[-1]:
            new = (idx + 1) % n_seg if raceline.closed else idx + 1
            if new >= n_seg or new in candidates:
                break
            candidates.append(new)
        else:
            break

    dist, idx, t, _ = best
    seg = segments[idx]
    fx, fy, fpsi = seg.pose(np.array(t))
    e_lat = -math.sin(float(fpsi)) * (x - float(fx)) + math.cos(float(fpsi)) * (y - float(fy))
    s = raceline.wrap_s(seg.s_start + t)
    if raceline.closed and s >= raceline.total_length:
        s = 0.0
    return s, float(e_lat)


def reference_window(
    raceline: Raceline,
    s0: float,
    horizon_times: Sequence[float],
    v_current: float,
    a_max: float = 4.5,
    dt_int: float = 0.02,
) -> List[RacelinePoint]:
    """
    Time-parameterized reference points along the raceline.

    Arc length advances with a speed that starts at v_current and relaxes toward
    v_ref(s) with rate at most a_max. With v_current = v_ref(s0) the window follows the
    velocity profile itself. The returned points carry that speed and its rate as
    (v_ref, a_ref).
    """
    times = np.asarray(horizon_times, dtype=float)
    if times.size and (times[0] < 0 or np.any(np.diff(times) < 0)):
        raise ValueError("horizon_times must be nondecreasing and start at or after 0")

    s = float(s0)
    v = max(float(v_current), 0.0)
    t = 0.0
    window = []
    for target in times:
        while t < target - 1e-12:
            h = min(dt_int, target - t)
            dv = float(np.clip(raceline.speed_at(s) - v, -a_max * h, a_max * h))
            s += (v + 0.5 * dv) * h
            v += dv
            t += h
        accel = float(np.clip((raceline.speed_at(s) - v) / dt_int, -a_max, a_max))
        if abs(raceline.speed_at(s) - v) < 1e-9:
            accel = float(np.interp(raceline.wrap_s(s), raceline.s, raceline.a_ref))
        point = raceline.point_at(s)
        window.append(RacelinePoint(point.s, point.x, point.y, point.psi, v, point.curvature, accel))
        if not raceline.closed and s >= raceline.total_length:
            s = raceline.total_length
    return window


def to_ego_frame(points: Sequence[RacelinePoint], ego_pose: Tuple[float, float, float]) -> np.ndarray:
    """
    Rigid transform of reference points into the ego frame.

    Returns:
        Array (M, 3) of (x_local, y_local, v_ref)
    """
    ex, ey, epsi = ego_pose
    c, s = math.cos(epsi), math.sin(epsi)
    out = np.empty((len(points), 3))
    for i, p in enumerate(points):
        dx, dy = p.x - ex, p.y - ey
        out[i, 0] = c * dx + s * dy
        out[i, 1] = -s * dx + c * dy
        out[i, 2] = p.v_ref
    return out


def from_ego_frame(local: np.ndarray, ego_pose: Tuple[float, float, float]) -> np.ndarray:
    """Inverse of to_ego_frame for the position columns; returns (M, 2) world coordinates."""
    ex, ey, epsi = ego_pose
    c, s = math.cos(epsi), math.sin(epsi)
    local = np.asarray(local, dtype=float)
    world = np.empty((local.shape[0], 2))
    world[:, 0] = ex + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = ey + s * local[:, 0] + c * local[:, 1]
    return world
