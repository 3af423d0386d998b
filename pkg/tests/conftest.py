"""Shared test fixtures for onramp-primitives."""

import json

import numpy as np
import pytest

from onramp.config import DEFAULT_CONFIG
from onramp.merge_extractor import MergeEvent
from onramp.nhmm import CovariateScaler, FitConfig, NhmmParams, PosteriorSamples
from onramp.synthetic import SceneLayout, ScriptedVehicle, build_scene, gen_merging_scene


@pytest.fixture(autouse=True)
def no_color(monkeypatch):
    """Plain terminal output so format_* strings can be matched literally."""
    monkeypatch.setenv("NO_COLOR", "1")


@pytest.fixture
def out_dir(tmp_path):
    """Output directory for CLI artifacts."""
    return tmp_path / "out"


@pytest.fixture
def layout():
    """Straight one-lane on-ramp, 3.5 m lanes, 250 m acceleration lane."""
    return SceneLayout()


@pytest.fixture
def single_merge(layout):
    """One merging car (lane change at frame 8, 80-frame maneuver) plus a target-lane leader 6 m ahead."""
    vehicles = [
        ScriptedVehicle(vehicle_id=1, first_frame=0, n_frames=110, s0=10.0, speed=15.0,
                        e0=0.1, lane_change_frame=8, period_frames=80),
        ScriptedVehicle(vehicle_id=2, first_frame=0, n_frames=110, s0=16.0, speed=15.0,
                        e0=layout.lane_width_m),
    ]
    return build_scene(layout, vehicles, seed=0)


@pytest.fixture
def busy_scene(layout):
    """Random scene with valid mergers, a truncated merger and a truck merger."""
    return gen_merging_scene(layout, n_vehicles=4, seed=7, n_through=4, n_ramp=2,
                             n_truncated=1, n_truck_mergers=1)


@pytest.fixture
def two_state_params():
    """Well-separated two-state NHMM over six covariates (states differ in v_y)."""
    return NhmmParams(
        mu=np.array([[0.0, 10.0, 0.0, 0.0], [0.5, 20.0, 0.2, 0.5]]),
        sigma=np.stack([0.25 * np.eye(4), 0.25 * np.eye(4)]),
        xi=np.array([[2.5, 0.0], [-2.5, 0.0]]),
        rho=np.array([[0.8, 0.0, 0.0, 0.0, 0.0, -0.5], [0.0] * 6]),
        pi0=np.array([0.5, 0.5]),
    )


@pytest.fixture
def fast_fit():
    """Short chain for tests that need a fit but not converged statistics."""
    return FitConfig(iterations=60, burn_in=20, thinning=1, seed=3)


def make_event(event_id="7-50", T=20, t_start=40, seed=0, vehicle_id=7):
    """Random event with plausible shapes; X columns stay inside their ranges."""
    rng = np.random.default_rng(seed)
    O = rng.normal([0.2, 15.0, 0.0, 0.0], 0.5, size=(T, 4))
    X = np.column_stack([
        rng.uniform(5.0, 60.0, size=(T, 4)),
        np.linspace(120.0, 80.0, T),
        np.full(T, 0.02),
    ])
    return MergeEvent(
        event_id=event_id,
        vehicle_id=vehicle_id,
        t_cross=t_start + T // 2,
        t_start=t_start,
        t_end=t_start + T - 1,
        O=O,
        X=X,
    )


def make_samples(rho, states=None, sd=None, n_states=None):
    """PosteriorSamples built from explicit rho draws (S, N, C) and state draws."""
    rho = np.asarray(rho, dtype=float)
    S, N, C = rho.shape
    names = tuple(f"x{i}" for i in range(C))
    sd = np.ones(C) if sd is None else np.asarray(sd, dtype=float)
    scaler = CovariateScaler(names=names, mean=np.zeros(C), sd=sd, active=np.ones(C, dtype=bool))
    if states is None:
        states = (np.zeros((S, 5), dtype=np.int16),)
    return PosteriorSamples(
        mu=np.zeros((S, N, 4)),
        sigma=np.tile(np.eye(4), (S, N, 1, 1)),
        xi=np.zeros((S, N, N)),
        rho=rho,
        pi0=np.full((S, N), 1.0 / N),
        states=tuple(np.asarray(s, dtype=np.int16) for s in states),
        event_ids=tuple(f"e{i}" for i in range(len(states))),
        scaler=scaler,
        covariate_names=names,
        config=FitConfig(iterations=S + 1, burn_in=1, thinning=1),
        seed=0,
    )


@pytest.fixture
def write_config(tmp_path):
    """Write a config file with nested overrides on top of DEFAULT_CONFIG."""

    def _write(overrides: dict, name: str = "onramp.json"):
        data = json.loads(json.dumps(DEFAULT_CONFIG))
        for key, value in overrides.items():
            if isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return _write


@pytest.fixture
def quick_pipeline(write_config, out_dir):
    """Config for a small end-to-end run that finishes in seconds."""
    return write_config({
        "out": str(out_dir),
        "seed": 11,
        "synth": {"n_vehicles": 3, "n_through": 3, "n_ramp": 1, "n_truncated": 1, "n_truck_mergers": 1},
        "nhmm": {"iterations": 40, "burn_in": 20, "thinning": 1, "k_states": 2},
        "segmentation": {"min_frames": 0},
        "tskm": {"k": 2, "restarts": 1, "max_iter": 5, "dba_iterations": 2},
    })
