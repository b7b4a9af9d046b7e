"""Shared fixtures for the workbench test suite."""
import numpy as np
import pytest

from app.engines.track.raceline import TrackSegment, TrackSpec, generate_track
from app.engines.vehicle.dynamics import VehicleState
from app.models.experiment import ExperimentConfig, SnmpcConfig, VehicleParams


@pytest.fixture
def vehicle() -> VehicleParams:
    return VehicleParams()


@pytest.fixture
def snmpc_config() -> SnmpcConfig:
    return SnmpcConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def straight_state() -> VehicleState:
    return VehicleState(x_pos=0.0, y_pos=0.0, psi=0.0, v_lon=10.0)


@pytest.fixture
def oval_track():
    """Small closed oval: two 200 m straights joined by two 80 m-radius half circles."""
    spec = TrackSpec(
        name="oval",
        closed=True,
        segments=[
            TrackSegment(type="straight", length_m=200.0),
            TrackSegment(type="arc", length_m=np.pi * 80.0, radius_m=80.0),
            TrackSegment(type="straight", length_m=200.0),
            TrackSegment(type="arc", length_m=np.pi * 80.0, radius_m=80.0),
        ],
    )
    return generate_track(spec, a_y_max=4.5, a_x_max=3.0)


@pytest.fixture
def short_experiment(tmp_path) -> ExperimentConfig:
    """A short closed-loop experiment on the training track."""
    return ExperimentConfig(
        duration_s=2.0,
        seeds=[0],
        regimes=["none"],
        eval_tracks=[],
        out_dir=str(tmp_path / "out"),
    )


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Logs, default outputs and checkpoints go to the test's temporary directory."""
    from app.core.config import settings

    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setattr(settings, "CHECKPOINT_DIR", str(tmp_path / "checkpoints"))
