"""
Run and comparison metrics.
"""
import math
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.models.enums import AgentMode, DisturbanceRegime, SolverStatus


def improvement_pct(static_value: float, adaptive_value: float) -> float:
    """
    100 * (static - adaptive) / static on max |e_lat|; 0 when both are 0.

    Undefined (NaN) when only the static value is 0. Reports serialize NaN as JSON null.
    """
    if static_value == adaptive_value:
        return 0.0
    if static_value == 0.0:
        return math.nan
    return 100.0 * (static_value - adaptive_value) / static_value


def degradation_pct(disturbed_value: float, nominal_value: float) -> float:
    """Relative growth of max |e_lat| from the undisturbed to a disturbed regime; NaN from a zero baseline."""
    if disturbed_value == nominal_value:
        return 0.0
    if nominal_value == 0.0:
        return math.nan
    return 100.0 * (disturbed_value - nominal_value) / nominal_value


class MetricsReport(BaseModel):
    """Summary of one closed-loop run."""

    label: str
    track: str
    regime: DisturbanceRegime
    agent_mode: AgentMode
    seed: int
    steps: int = 0
    max_abs_e_lat: float = 0.0
    mean_abs_e_lat: float = 0.0
    max_abs_e_v: float = 0.0
    violation_count: int = 0
    infeasible_steps: int = 0
    max_iteration_steps: int = 0
    fallback_steps: int = 0
    divergence_steps: int = 0
    solve_time_mean_ms: float = 0.0
    solve_time_p95_ms: float = 0.0
    solve_time_max_ms: float = 0.0
    laps_completed: float = 0.0
    aborted: bool = False
    abort_reason: Optional[str] = None

    @classmethod
    def from_frames(
        cls,
        trajectory: pd.DataFrame,
        solver: pd.DataFrame,
        track_length: float,
        aborted: bool = False,
        abort_reason: Optional[str] = None,
        **identity,
    ) -> "MetricsReport":
        """Aggregate trajectory and solver logs; empty logs give an all-zero report."""
        report = cls(aborted=aborted, abort_reason=abort_reason, **identity)
        if trajectory.empty:
            return report
        e_lat = trajectory["e_lat"].abs()
        times = solver["solve_time_ms"].to_numpy() if not solver.empty else np.zeros(1)
        statuses = solver["status"] if not solver.empty else pd.Series(dtype=str)
        return report.model_copy(update={
            "steps": int(len(trajectory)),
            "max_abs_e_lat": float(e_lat.max()),
            "mean_abs_e_lat": float(e_lat.mean()),
            "max_abs_e_v": float(trajectory["e_v"].abs().max()),
            "violation_count": int(trajectory["violated"].sum()),
            "infeasible_steps": int((statuses == SolverStatus.INFEASIBLE.value).sum()),
            "max_iteration_steps": int((statuses == SolverStatus.MAX_ITERATIONS.value).sum()),
            "fallback_steps": int(trajectory["fallback"].sum()),
            "divergence_steps": int(solver["diverged"].sum()) if "diverged" in solver else 0,
            "solve_time_mean_ms": float(np.mean(times)),
            "solve_time_p95_ms": float(np.percentile(times, 95)),
            "solve_time_max_ms": float(np.max(times)),
            "laps_completed": float(trajectory["s_progress"].iloc[-1] / track_length),
        })

    def deterministic_view(self) -> Dict[str, object]:
        """Report fields that are reproducible run to run (wall-clock timing excluded)."""
        return self.model_dump(exclude={"solve_time_mean_ms", "solve_time_p95_ms", "solve_time_max_ms"})


class ComparisonRow(BaseModel):
    """Paired static/adaptive result for one (track, regime, seed)."""

    track: str
    regime: DisturbanceRegime
    seed: int
    agent_mode: AgentMode
    static_max_abs_e_lat: float
    adaptive_max_abs_e_lat: float
    static_infeasible_steps: int = 0
    adaptive_infeasible_steps: int = 0
    improvement_pct: float


class ComparisonReport(BaseModel):
    """Static-vs-adaptive comparison over regimes and seeds."""

    runs: List[MetricsReport] = Field(default_factory=list)
    rows: List[ComparisonRow] = Field(default_factory=list)
    median_improvement_pct: Dict[str, float] = Field(default_factory=dict)
    degradation_pct: Dict[str, float] = Field(default_factory=dict)

    @classmethod
    def from_runs(cls, runs: List[MetricsReport], static_mode: AgentMode = AgentMode.STATIC) -> "ComparisonReport":
        """
        Pair runs by (track, regime, seed): the static_mode run against every other mode.
        When only static_mode runs exist, each run is paired with itself.

        Degradation compares each disturbed regime with regime none for the candidate
        runs, per track, on median max |e_lat|.
        """
        index = {(r.track, r.regime, r.seed, r.agent_mode): r for r in runs}
        self_comparison = all(r.agent_mode == static_mode for r in runs)
        rows = []
        for (track, regime, seed, mode), adaptive in sorted(index.items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2], kv[0][3].value)):
            if mode == static_mode and not self_comparison:
                continue
            static = index.get((track, regime, seed, static_mode))
            if static is None:
                continue
            rows.append(ComparisonRow(
                track=track,
                regime=regime,
                seed=seed,
                agent_mode=mode,
                static_max_abs_e_lat=static.max_abs_e_lat,
                adaptive_max_abs_e_lat=adaptive.max_abs_e_lat,
                static_infeasible_steps=static.infeasible_steps,
                adaptive_infeasible_steps=adaptive.infeasible_steps,
                improvement_pct=improvement_pct(static.max_abs_e_lat, adaptive.max_abs_e_lat),
            ))

        median_improvement = {}
        if rows:
            frame = pd.DataFrame([r.model_dump(mode="json") for r in rows])
            for (track, regime, mode), group in frame.groupby(["track", "regime", "agent_mode"], sort=True):
                static_med = float(group["static_max_abs_e_lat"].median())
                adaptive_med = float(group["adaptive_max_abs_e_lat"].median())
                median_improvement[f"{track}/{regime}/{mode}"] = improvement_pct(static_med, adaptive_med)

        degradation = {}
        adaptive_runs = runs if self_comparison else [r for r in runs if r.agent_mode != static_mode]
        for track, mode in sorted({(r.track, r.agent_mode.value) for r in adaptive_runs}):
            group = [r for r in adaptive_runs if r.track == track and r.agent_mode.value == mode]
            nominal = [r.max_abs_e_lat for r in group if r.regime == DisturbanceRegime.NONE]
            if not nominal:
                continue
            nominal_med = float(np.median(nominal))
            for regime in DisturbanceRegime:
                if regime == DisturbanceRegime.NONE:
                    continue
                disturbed = [r.max_abs_e_lat for r in group if r.regime == regime]
                if disturbed:
                    degradation[f"{track}/{regime.value}/{mode}"] = degradation_pct(float(np.median(disturbed)), nominal_med)

        return cls(runs=runs, rows=rows, median_improvement_pct=median_improvement, degradation_pct=degradation)
