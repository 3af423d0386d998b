"""Tests for reports computed from fit and cluster artifacts."""

import numpy as np
import pytest

from onramp.errors import InputError
from onramp.io import read_csv, write_json, write_jsonl
from onramp.merge_extractor import COVARIATE_NAMES
from onramp.nhmm import CovariateScaler, NhmmParams
from onramp.reports import (
    CLUSTERS_FILE,
    EVENTS_FILE,
    MODELS_DIR,
    PRIMITIVES_FILE,
    coefficients,
    load_artifacts,
    pattern_chains,
    pattern_frequency,
    pattern_transitions,
    significance_counts,
    transition_series,
    write_reports,
)
from tests.conftest import make_event


def _model(event, significant=None, names=("dx_f", "d")):
    scaler = CovariateScaler.fit(event.X)
    C = len(scaler.active_names)
    rng = np.random.default_rng(0)
    params = NhmmParams(
        mu=np.zeros((2, 4)),
        sigma=np.tile(np.eye(4), (2, 1, 1)),
        xi=np.array([[1.0, 0.0], [-1.0, 0.0]]),
        rho=np.vstack([rng.normal(size=(1, C)), np.zeros((1, C))]),
        pi0=np.array([0.5, 0.5]),
    )
    model = {
        "model_id": event.event_id,
        "event_ids": [event.event_id],
        "k_states": 2,
        "homogeneous": False,
        "params": params.to_dict(),
        "scaler": scaler.to_dict(),
        "states": {event.event_id: [0] * event.T},
        "significance": None,
    }
    if significant is not None:
        flags = np.asarray(significant, dtype=bool)
        model["significance"] = {
            "covariate_names": list(names),
            "level": 0.95,
            "mean_std": np.ones(flags.shape),
            "mean_raw": np.full(flags.shape, 0.5),
            "lower": np.where(flags, 0.1, -1.0),
            "upper": np.ones(flags.shape),
            "significant": flags,
        }
    return model


@pytest.fixture
def events():
    return [make_event("1-50", T=15, seed=1), make_event("2-80", T=12, seed=2), make_event("3-90", seed=3)]


@pytest.fixture
def clusters():
    return {"k_clusters": 3, "assignments": {"1-50/0": 2, "1-50/1": 0, "2-80/0": 2}}


@pytest.fixture
def primitives():
    return [
        {"primitive_id": "1-50/1", "event_id": "1-50", "start_frame": 48},
        {"primitive_id": "1-50/0", "event_id": "1-50", "start_frame": 40},
        {"primitive_id": "2-80/0", "event_id": "2-80", "start_frame": 40},
        {"primitive_id": "2-80/1", "event_id": "2-80", "start_frame": 45},  # filtered out
    ]


class TestPatternFrequency:
    def test_counts_include_empty_clusters(self, clusters):
        rows = pattern_frequency(clusters)
        assert [(r["cluster"], r["count"]) for r in rows] == [(0, 1), (1, 0), (2, 2)]
        assert sum(r["share"] for r in rows) == pytest.approx(1.0)


class TestSignificanceCounts:
    def test_ranked_by_events(self, events):
        models = [
            _model(events[0], [[True, False], [False, False]]),
            _model(events[1], [[False, False], [False, True]]),
            _model(events[2], [[True, True], [False, False]]),
            _model(make_event("4-10"), None),
        ]
        rows = significance_counts(models)
        assert [r["covariate"] for r in rows][:2] == ["dx_f", "d"]
        top = rows[0]
        assert (top["rank"], top["significant_events"], top["tested_events"]) == (1, 2, 3)
        assert top["frequency"] == pytest.approx(2 / 3)
        assert rows[1]["significant_events"] == 2
        untested = [r for r in rows if r["tested_events"] == 0]
        assert {r["covariate"] for r in untested} == set(COVARIATE_NAMES) - {"dx_f", "d"}
        assert all(r["frequency"] == 0.0 for r in untested)
        assert [r["rank"] for r in rows] == list(range(1, 7))

    def test_positional_names_appended(self, events):
        rows = significance_counts([_model(events[0], [[True], [False]], names=("x0",))])
        assert rows[0]["covariate"] == "x0"
        assert len(rows) == len(COVARIATE_NAMES) + 1


class TestTransitionSeries:
    def test_rows_are_distributions(self, events):
        models = [_model(e) for e in events[:2]]
        series, means = transition_series(models, events)
        assert len(series) == (15 + 12) * 4
        assert len(means) == 2 * 4
        for event_id, frame, i in {(r["event_id"], r["frame"], r["i"]) for r in series}:
            total = sum(r["p"] for r in series
                        if (r["event_id"], r["frame"], r["i"]) == (event_id, frame, i))
            assert total == pytest.approx(1.0)
        assert series[0]["event_id"] == "1-50" and series[0]["frame"] == 40

    def test_homogeneous_model(self, events):
        model = _model(events[0])
        model["homogeneous"] = True
        params = NhmmParams.from_dict(model["params"])
        model["params"] = NhmmParams(params.mu, params.sigma, params.xi, params.rho[:, :0], params.pi0).to_dict()
        series, _ = transition_series([model], events)
        stay = [r["p"] for r in series if r["i"] == 0 and r["j"] == 0]
        assert len(stay) == 15
        assert stay == pytest.approx([np.exp(1.0) / (np.exp(1.0) + 1.0)] * 15)


class TestChains:
    def test_ordered_by_start_frame(self, primitives, clusters, events):
        chains = pattern_chains(primitives, clusters, events)
        assert chains == [
            {"event_id": "1-50", "n_primitives": 2, "chain": "2>0"},
            {"event_id": "2-80", "n_primitives": 1, "chain": "2"},
            {"event_id": "3-90", "n_primitives": 0, "chain": ""},
        ]

    def test_transitions(self):
        chains = [{"chain": "0>1>0"}, {"chain": "0>1"}, {"chain": ""}, {"chain": "2"}]
        assert pattern_transitions(chains) == [
            {"from_cluster": 0, "to_cluster": 1, "count": 2},
            {"from_cluster": 1, "to_cluster": 0, "count": 1},
        ]


class TestCoefficients:
    def test_one_row_per_state_and_covariate(self, events):
        rows = coefficients([_model(events[1], [[True, False], [False, False]]), _model(events[0], None)])
        assert len(rows) == 4
        assert rows[0] == {
            "event_id": "2-80", "state": 0, "covariate": "dx_f", "mean_std": 1.0, "mean_raw": 0.5,
            "lower": 0.1, "upper": 1.0, "significant": True,
        }


class TestWriteReports:
    def _write_artifacts(self, out, events, primitives, clusters):
        write_jsonl([e.to_dict() for e in events], out / EVENTS_FILE)
        for e in events:
            write_json(_model(e, [[True, False], [False, False]]), out / MODELS_DIR / f"{e.event_id}.json")
        write_jsonl(primitives, out / PRIMITIVES_FILE)
        write_json(clusters, out / CLUSTERS_FILE)

    def test_writes_every_report(self, tmp_path, events, primitives, clusters):
        self._write_artifacts(tmp_path, events, primitives, clusters)
        written = write_reports(tmp_path)
        assert set(written) == {
            "pattern_frequency.csv", "significance_counts.csv", "transition_series.csv",
            "transition_mean.csv", "pattern_chains.csv", "coefficients.csv", "pattern_transitions.csv",
        }
        counts = read_csv(tmp_path / "significance_counts.csv")
        assert counts[0]["covariate"] == "dx_f"
        assert counts[0]["significant_events"] == "3"

    def test_reads_artifacts_back(self, tmp_path, events, primitives, clusters):
        self._write_artifacts(tmp_path, events, primitives, clusters)
        art = load_artifacts(tmp_path)
        assert [e.event_id for e in art.events] == ["1-50", "2-80", "3-90"]
        assert len(art.models) == 3

    def test_missing_clusters(self, tmp_path, events, primitives, clusters):
        self._write_artifacts(tmp_path, events, primitives, clusters)
        (tmp_path / CLUSTERS_FILE).unlink()
        with pytest.raises(InputError, match="clusters.json"):
            write_reports(tmp_path)

    def test_missing_models_dir(self, tmp_path, events):
        write_jsonl([e.to_dict() for e in events], tmp_path / EVENTS_FILE)
        with pytest.raises(InputError, match="models"):
            load_artifacts(tmp_path)
