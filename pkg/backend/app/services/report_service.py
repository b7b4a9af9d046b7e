"""
Report export service.

Turns run logs (header.json, trajectory.csv, solver.jsonl, decisions.csv per run
directory) into plot-ready CSV tables. Every table is written with its full header even
when no run contributes rows.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from loguru import logger

IDENTITY_COLUMNS = ["label", "track", "regime", "agent_mode", "seed"]
STRAIGHT_CURVATURE = 1e-3

ARTIFACT_COLUMNS: Dict[str, List[str]] = {
    "action_heatmap.csv": IDENTITY_COLUMNS + ["step", "s", "curvature", "kappa", "N_u", "T_u", "source"],
    "e_lat_profile.csv": IDENTITY_COLUMNS + ["step", "s", "e_lat"],
    "e_v_profile.csv": IDENTITY_COLUMNS + ["step", "s", "v_lon", "v_ref", "e_v"],
    "status_timeline.csv": IDENTITY_COLUMNS + ["step", "status", "fallback", "sqp_iters", "kkt_residual", "max_slack", "diverged"],
    "boxplot_stats.csv": ["track", "regime", "agent_mode", "n", "min", "q1", "median", "q3", "max", "whisker_low", "whisker_high", "mean"],
    "gg_data.csv": IDENTITY_COLUMNS + ["step", "a_lon", "a_lat", "h_true"],
    "decision_pattern.csv": IDENTITY_COLUMNS + ["segment", "n", "mean_kappa", "mean_T_u"],
}


@dataclass
class RunArtifacts:
    """Logs of one run directory."""

    label: str
    header: Dict
    trajectory: pd.DataFrame
    solver: pd.DataFrame
    decisions: pd.DataFrame

    def identity(self) -> Dict[str, object]:
        return {
            "label": self.label,
            "track": self.header.get("track"),
            "regime": self.header.get("regime"),
            "agent_mode": self.header.get("agent_mode"),
            "seed": self.header.get("seed"),
        }


def boxplot_stats(values: Sequence[float]) -> Dict[str, float]:
    """Quartiles, extremes and Tukey whiskers (1.5 IQR, clipped to the data)."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return {k: float("nan") for k in ("min", "q1", "median", "q3", "max", "whisker_low", "whisker_high", "mean")} | {"n": 0}
    q1, median, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    inside = x[(x >= q1 - 1.5 * iqr) & (x <= q3 + 1.5 * iqr)]
    return {
        "n": int(x.size),
        "min": float(x.min()),
        "q1": float(q1),
        "median": float(median),
        "q3": float(q3),
        "max": float(x.max()),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "mean": float(x.mean()),
    }


def _read_jsonl(path: Path) -> pd.DataFrame:
    if not path.exists() or path.stat().st_size == 0:
        return pd.DataFrame()
    return pd.read_json(path, orient="records", lines=True)


def _read_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        return pd.DataFrame()
    return pd.read_csv(path)


class ReportService:
    """Service collecting run logs and exporting report tables."""

    def load_run(self, run_dir: str) -> RunArtifacts:
        directory = Path(run_dir)
        header_path = directory / "header.json"
        if not header_path.exists():
            raise FileNotFoundError(f"No run header in {directory}")
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        return RunArtifacts(
            label=directory.name,
            header=header,
            trajectory=_read_csv(directory / "trajectory.csv"),
            solver=_read_jsonl(directory / "solver.jsonl"),
            decisions=_read_csv(directory / "decisions.csv"),
        )

    def discover_runs(self, root: str) -> List[RunArtifacts]:
        """All run directories below root (root itself included), in name order."""
        base = Path(root)
        if not base.exists():
            raise FileNotFoundError(f"Run directory not found: {base}")
        headers = sorted(base.rglob("header.json"))
        return [self.load_run(str(h.parent)) for h in headers]

    def _per_run(self, runs: List[RunArtifacts], name: str, build) -> pd.DataFrame:
        frames = []
        for run in runs:
            frame = build(run)
            if frame is None or frame.empty:
                continue
            for key, value in reversed(list(run.identity().items())):
                frame.insert(0, key, value)
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=ARTIFACT_COLUMNS[name])
        return pd.concat(frames, ignore_index=True)[ARTIFACT_COLUMNS[name]]

    @staticmethod
    def _select(frame: pd.DataFrame, columns: List[str]) -> pd.DataFrame:
        if frame.empty:
            return frame
        return frame[columns].copy()

    def action_heatmap(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        return self._per_run(runs, "action_heatmap.csv", lambda r: self._select(r.decisions, ["step", "s", "curvature", "kappa", "N_u", "T_u", "source"]))

    def e_lat_profile(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        return self._per_run(runs, "e_lat_profile.csv", lambda r: self._select(r.trajectory, ["step", "s", "e_lat"]))

    def e_v_profile(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        return self._per_run(runs, "e_v_profile.csv", lambda r: self._select(r.trajectory, ["step", "s", "v_lon", "v_ref", "e_v"]))

    def gg_data(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        return self._per_run(runs, "gg_data.csv", lambda r: self._select(r.trajectory, ["step", "a_lon", "a_lat", "h_true"]))

    def status_timeline(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        """One row per simulation step: the applied step's solver status and fallback flag."""

        def build(run: RunArtifacts) -> pd.DataFrame:
            if run.trajectory.empty:
                return run.trajectory
            steps = run.trajectory[["step", "status", "fallback"]]
            solver_cols = ["step", "sqp_iters", "kkt_residual", "max_slack", "diverged"]
            if run.solver.empty:
                solver = pd.DataFrame(columns=solver_cols)
            else:
                solver = run.solver[solver_cols]
            return steps.merge(solver, on="step", how="left")

        return self._per_run(runs, "status_timeline.csv", build)

    def boxplot_table(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        """|e_lat| distribution per (track, regime, agent mode) over all steps and seeds."""
        profile = self.e_lat_profile(runs)
        rows = []
        if not profile.empty:
            for (track, regime, mode), group in profile.groupby(["track", "regime", "agent_mode"], sort=True):
                rows.append({"track": track, "regime": regime, "agent_mode": mode, **boxplot_stats(group["e_lat"].abs())})
        return pd.DataFrame(rows, columns=ARTIFACT_COLUMNS["boxplot_stats.csv"])

    def decision_pattern(self, runs: List[RunArtifacts]) -> pd.DataFrame:
        """Mean kappa and T_u of switching decisions on straights versus curves."""

        def build(run: RunArtifacts) -> pd.DataFrame:
            if run.decisions.empty:
                return run.decisions
            decisions = run.decisions.assign(
                segment=np.where(run.decisions["curvature"].abs() > STRAIGHT_CURVATURE, "curve", "straight")
            )
            return (
                decisions.groupby("segment", sort=True)
                .agg(n=("kappa", "size"), mean_kappa=("kappa", "mean"), mean_T_u=("T_u", "mean"))
                .reset_index()
            )

        return self._per_run(runs, "decision_pattern.csv", build)

    def export_report(self, runs: List[RunArtifacts], out_dir: str) -> Dict[str, str]:
        """
        Write all report tables.

        Args:
            runs: Loaded run logs (may be empty)
            out_dir: Target directory

        Returns:
            Mapping of artifact name to written path
        """
        target = Path(out_dir)
        target.mkdir(parents=True, exist_ok=True)
        tables = {
            "action_heatmap.csv": self.action_heatmap(runs),
            "e_lat_profile.csv": self.e_lat_profile(runs),
            "e_v_profile.csv": self.e_v_profile(runs),
            "status_timeline.csv": self.status_timeline(runs),
            "boxplot_stats.csv": self.boxplot_table(runs),
            "gg_data.csv": self.gg_data(runs),
            "decision_pattern.csv": self.decision_pattern(runs),
        }
        paths = {}
        for name, table in tables.items():
            path = target / name
            table.to_csv(path, index=False)
            paths[name] = str(path)
        logger.info(f"Report with {len(tables)} tables from {len(runs)} runs written to {target}")
        return paths


report_service = ReportService()
