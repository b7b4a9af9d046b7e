"""Run metrics, static/adaptive comparison and report export."""
import json
import math

import numpy as np
import pandas as pd
import pytest

from app.models.enums import AgentMode, DisturbanceRegime
from app.models.metrics import ComparisonReport, MetricsReport, degradation_pct, improvement_pct
from app.services.report_service import ARTIFACT_COLUMNS, ReportService, boxplot_stats
from app.workers.closed_loop import TRAJECTORY_COLUMNS, RunLog


def _run(mode, regime, seed, max_e_lat, track="training", infeasible=0):
    return MetricsReport(
        label=f"{track}_{regime.value}_{mode.value}_seed{seed}",
        track=track,
        regime=regime,
        agent_mode=mode,
        seed=seed,
        max_abs_e_lat=max_e_lat,
        infeasible_steps=infeasible,
    )


def _synthetic_log(mode="static", regime="table3", seed=0, n=12, e_lat_scale=0.1):
    trajectory = []
    for i in range(n):
        row = {c: 0.0 for c in TRAJECTORY_COLUMNS}
        row.update({
            "step": i,
            "s": 2.0 * i,
            "s_progress": 2.0 * i,
            "e_lat": e_lat_scale * math.sin(i),
            "v_lon": 20.0,
            "v_ref": 20.5,
            "e_v": -0.5,
            "status": "infeasible" if i == 5 else "solved",
            "fallback": i == 5,
            "violated": False,
        })
        trajectory.append(row)
    solver = [
        {"step": i, "status": "infeasible" if i == 5 else "solved", "kkt_residual": 1e-7, "max_slack": 0.0,
         "sqp_iters": 3, "solve_time_ms": 4.0, "diverged": False, "kappa": 0.42, "N_u": 25,
         "switch_step": 0, "last_variance_node": 24}
        for i in range(n)
    ]
    decisions = [
        {"step": 0, "s": 0.0, "curvature": 0.0, "kappa": 0.4, "N_u": 25, "T_u": 2.0, "source": "switch"},
        {"step": 6, "s": 12.0, "curvature": 0.01, "kappa": 1.2, "N_u": 10, "T_u": 0.8, "source": "switch"},
    ]
    header = {"track": "training", "regime": regime, "agent_mode": mode, "seed": seed}
    return RunLog(header=header, trajectory=trajectory, solver=solver, decisions=decisions)


class TestImprovement:
    def test_examples(self):
        assert improvement_pct(1.0, 0.8) == pytest.approx(20.0)
        assert improvement_pct(0.5, 0.75) == pytest.approx(-50.0)
        assert improvement_pct(0.4, 0.4) == 0.0
        assert improvement_pct(0.0, 0.0) == 0.0
        assert math.isnan(improvement_pct(0.0, 0.1))

    def test_degradation(self):
        assert degradation_pct(1.5, 1.0) == pytest.approx(50.0)
        assert degradation_pct(1.0, 1.0) == 0.0
        assert math.isnan(degradation_pct(0.2, 0.0))


class TestMetricsReport:
    def test_empty_frames(self):
        report = MetricsReport.from_frames(
            pd.DataFrame(columns=TRAJECTORY_COLUMNS), pd.DataFrame(), 1000.0,
            label="x", track="training", regime=DisturbanceRegime.NONE, agent_mode=AgentMode.STATIC, seed=0,
        )
        assert report.steps == 0 and report.max_abs_e_lat == 0.0

    def test_from_synthetic_log(self):
        log = _synthetic_log()
        report = MetricsReport.from_frames(
            log.trajectory_frame(), log.solver_frame(), 220.0,
            label="x", track="training", regime=DisturbanceRegime.TABLE3, agent_mode=AgentMode.STATIC, seed=0,
        )
        e_lat = np.abs(0.1 * np.sin(np.arange(12)))
        assert report.steps == 12
        assert report.max_abs_e_lat == pytest.approx(e_lat.max())
        assert report.mean_abs_e_lat == pytest.approx(e_lat.mean())
        assert report.max_abs_e_v == pytest.approx(0.5)
        assert report.infeasible_steps == 1 and report.fallback_steps == 1
        assert report.laps_completed == pytest.approx(22.0 / 220.0)
        assert report.solve_time_p95_ms == pytest.approx(4.0)

    def test_deterministic_view_drops_timing(self):
        view = _run(AgentMode.STATIC, DisturbanceRegime.NONE, 0, 0.2).deterministic_view()
        assert "solve_time_mean_ms" not in view and "max_abs_e_lat" in view


class TestComparison:
    def test_paired_by_seed(self):
        runs = [
            _run(AgentMode.STATIC, DisturbanceRegime.TABLE3, 0, 1.0),
            _run(AgentMode.STATIC, DisturbanceRegime.TABLE3, 1, 2.0),
            _run(AgentMode.ADAPTIVE, DisturbanceRegime.TABLE3, 0, 0.8),
            _run(AgentMode.ADAPTIVE, DisturbanceRegime.TABLE3, 1, 1.0),
        ]
        report = ComparisonReport.from_runs(runs)
        assert [(r.seed, r.improvement_pct) for r in report.rows] == [(0, pytest.approx(20.0)), (1, pytest.approx(50.0))]
        assert report.median_improvement_pct["training/table3/adaptive"] == pytest.approx(improvement_pct(1.5, 0.9))

    def test_self_comparison_is_zero(self):
        runs = [_run(AgentMode.STATIC, regime, seed, 0.1 * (seed + 1)) for regime in DisturbanceRegime for seed in range(3)]
        report = ComparisonReport.from_runs(runs)
        assert len(report.rows) == len(runs)
        assert all(r.improvement_pct == 0.0 for r in report.rows)
        assert all(v == 0.0 for v in report.median_improvement_pct.values())

    def test_zero_static_error_serializes_as_null(self):
        runs = [
            _run(AgentMode.STATIC, DisturbanceRegime.NONE, 0, 0.0),
            _run(AgentMode.ADAPTIVE, DisturbanceRegime.NONE, 0, 0.02),
        ]
        report = ComparisonReport.from_runs(runs)
        assert math.isnan(report.rows[0].improvement_pct)
        assert json.loads(report.model_dump_json())["rows"][0]["improvement_pct"] is None

    def test_unpaired_runs_are_skipped(self):
        runs = [
            _run(AgentMode.STATIC, DisturbanceRegime.TABLE3, 0, 1.0),
            _run(AgentMode.ADAPTIVE, DisturbanceRegime.TABLE3, 1, 0.5),
        ]
        assert ComparisonReport.from_runs(runs).rows == []

    def test_modes_are_kept_apart(self):
        runs = [
            _run(AgentMode.STATIC, DisturbanceRegime.TABLE3, 0, 1.0),
            _run(AgentMode.ADAPTIVE, DisturbanceRegime.TABLE3, 0, 0.5),
            _run(AgentMode.ADAPT_KAPPA_ONLY, DisturbanceRegime.TABLE3, 0, 0.9),
        ]
        report = ComparisonReport.from_runs(runs)
        assert report.median_improvement_pct == pytest.approx({
            "training/table3/adapt_kappa_only": 10.0,
            "training/table3/adaptive": 50.0,
        })

    def test_degradation_against_undisturbed(self):
        runs = []
        for seed in range(3):
            runs += [
                _run(AgentMode.STATIC, DisturbanceRegime.NONE, seed, 0.1),
                _run(AgentMode.ADAPTIVE, DisturbanceRegime.NONE, seed, 0.1),
                _run(AgentMode.STATIC, DisturbanceRegime.TABLE3, seed, 0.3),
                _run(AgentMode.ADAPTIVE, DisturbanceRegime.TABLE3, seed, 0.15),
            ]
        report = ComparisonReport.from_runs(runs)
        assert report.degradation_pct == pytest.approx({"training/table3/adaptive": 50.0})


class TestBoxplot:
    def test_recompute(self):
        values = [0.1, 0.2, 0.25, 0.3, 0.35, 0.4, 3.0]
        stats = boxplot_stats(values)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        assert stats["q1"] == pytest.approx(q1)
        assert stats["median"] == pytest.approx(median)
        assert stats["q3"] == pytest.approx(q3)
        assert stats["max"] == 3.0
        assert stats["whisker_high"] == 0.4
        assert stats["whisker_low"] == 0.1
        assert stats["n"] == 7

    def test_empty(self):
        stats = boxplot_stats([])
        assert stats["n"] == 0 and math.isnan(stats["median"])


class TestReportExport:
    def test_empty_report_writes_headers(self, tmp_path):
        paths = ReportService().export_report([], str(tmp_path / "report"))
        assert set(paths) == set(ARTIFACT_COLUMNS)
        for name, path in paths.items():
            frame = pd.read_csv(path)
            assert frame.empty
            assert list(frame.columns) == ARTIFACT_COLUMNS[name]

    def test_tables_from_run_logs(self, tmp_path):
        service = ReportService()
        _synthetic_log("static", seed=0).write(str(tmp_path / "runs" / "a"))
        _synthetic_log("adaptive", seed=0, e_lat_scale=0.05).write(str(tmp_path / "runs" / "b"))
        runs = service.discover_runs(str(tmp_path))
        assert [r.label for r in runs] == ["a", "b"]

        paths = service.export_report(runs, str(tmp_path / "report"))
        timeline = pd.read_csv(paths["status_timeline.csv"])
        assert len(timeline) == 24
        assert timeline.loc[timeline["step"] == 5, "status"].eq("infeasible").all()

        heatmap = pd.read_csv(paths["action_heatmap.csv"])
        assert len(heatmap) == 4 and set(heatmap["agent_mode"]) == {"static", "adaptive"}

        box = pd.read_csv(paths["boxplot_stats.csv"])
        profile = pd.read_csv(paths["e_lat_profile.csv"])
        for _, row in box.iterrows():
            group = profile[profile["agent_mode"] == row["agent_mode"]]["e_lat"].abs()
            assert row["median"] == pytest.approx(group.median())
            assert row["max"] == pytest.approx(group.max())

        pattern = pd.read_csv(paths["decision_pattern.csv"])
        curve = pattern[(pattern["label"] == "a") & (pattern["segment"] == "curve")].iloc[0]
        assert curve["mean_kappa"] == pytest.approx(1.2) and curve["mean_T_u"] == pytest.approx(0.8)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ReportService().discover_runs(str(tmp_path / "nothing"))
