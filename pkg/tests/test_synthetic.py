"""Tests for the synthetic generators and their ledgers."""

import numpy as np
import pytest

from onramp import errors
from onramp.errors import GenerationError, InputError
from onramp.nhmm import transition_matrix_at
from onramp.synthetic import (
    GENERATOR_VERSION,
    SceneLayout,
    ScriptedVehicle,
    build_scene,
    crossing_offset,
    default_templates,
    gen_merging_scene,
    gen_nhmm_sequences,
    gen_primitive_families,
)
from onramp.trajectory_store import AgentType


class TestNhmmSequences:
    def test_shapes_and_ids(self, two_state_params):
        events, ledger = gen_nhmm_sequences(two_state_params, n_sequences=4, T=25, seed=1)
        assert [e.event_id for e in events] == ["syn-0000", "syn-0001", "syn-0002", "syn-0003"]
        assert all(e.O.shape == (25, 4) and e.X.shape == (25, 6) for e in events)
        assert ledger.kind == "nhmm"
        assert ledger.generator_version == GENERATOR_VERSION
        assert len(ledger.truth["states"]) == 4

    def test_reproducible(self, two_state_params):
        a, _ = gen_nhmm_sequences(two_state_params, 2, 30, seed=8)
        b, _ = gen_nhmm_sequences(two_state_params, 2, 30, seed=8)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.O, y.O)
            np.testing.assert_array_equal(x.X, y.X)

    def test_prefix_stable_when_adding_sequences(self, two_state_params):
        few, _ = gen_nhmm_sequences(two_state_params, 1, 30, seed=8)
        many, _ = gen_nhmm_sequences(two_state_params, 3, 30, seed=8)
        np.testing.assert_array_equal(few[0].O, many[0].O)

    def test_shared_covariate_path(self, two_state_params):
        X = np.zeros((20, 6))
        events, _ = gen_nhmm_sequences(two_state_params, 2, 20, covariates=X)
        assert all(np.array_equal(e.X, X) for e in events)

    def test_covariate_shape_checked(self, two_state_params):
        with pytest.raises(InputError):
            gen_nhmm_sequences(two_state_params, 2, 20, covariates=np.zeros((19, 6)))

    def test_transition_frequencies(self, two_state_params):
        X = np.zeros((400, 6))
        _, ledger = gen_nhmm_sequences(two_state_params, 20, 400, seed=3, covariates=X)
        A = transition_matrix_at(two_state_params, X[0])
        counts = np.zeros((2, 2))
        for q in ledger.truth["states"]:
            np.add.at(counts, (q[:-1], q[1:]), 1)
        empirical = counts / counts.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(empirical, A, atol=0.02)

    def test_emission_means(self, two_state_params):
        events, ledger = gen_nhmm_sequences(two_state_params, 5, 200, seed=4)
        O = np.concatenate([e.O for e in events])
        q = np.concatenate(ledger.truth["states"])
        for k in range(2):
            np.testing.assert_allclose(O[q == k].mean(axis=0), two_state_params.mu[k], atol=0.1)


class TestScriptedVehicle:
    def test_crossing_offset(self):
        assert crossing_offset(3.5, 80, 0.1) == 39

    def test_lane_change_ends_one_lane_over(self):
        v = ScriptedVehicle(1, 0, 120, s0=0.0, speed=10.0, e0=0.1, lane_change_frame=10, period_frames=80)
        e, v_lat = v.lateral(0.1, 3.5)
        assert e[:11] == pytest.approx(np.full(11, 0.1))
        assert e[90:] == pytest.approx(np.full(30, 3.6))
        assert np.all(v_lat >= 0.0)
        assert v.peak_frames == (30, 70)

    def test_straight_without_lane_change(self):
        v = ScriptedVehicle(1, 5, 10, s0=2.0, speed=10.0)
        e, v_lat = v.lateral(0.1, 3.5)
        assert np.all(e == 0.0) and np.all(v_lat == 0.0)
        assert v.longitudinal(0.1)[-1] == pytest.approx(11.0)
        assert v.peak_frames is None


class TestBuildScene:
    def test_duplicate_ids(self, layout):
        v = ScriptedVehicle(1, 0, 20, s0=0.0, speed=10.0)
        with pytest.raises(GenerationError, match="duplicate"):
            build_scene(layout, [v, v])

    def test_leaving_road(self, layout):
        with pytest.raises(GenerationError, match="leaves"):
            build_scene(layout, [ScriptedVehicle(1, 0, 100, s0=590.0, speed=30.0)])

    def test_peak_too_close_to_edge(self, layout):
        # First peak at frame 28, only two frames after the track starts
        v = ScriptedVehicle(1, 26, 80, s0=0.0, speed=10.0, e0=0.1, lane_change_frame=8, period_frames=80)
        with pytest.raises(GenerationError, match="too close"):
            build_scene(layout, [v])

    def test_truck_size(self, layout):
        scene, _ = build_scene(layout, [ScriptedVehicle(1, 0, 20, s0=0.0, speed=10.0,
                                                        agent_type=AgentType.TRUCK)])
        assert scene.tracks[1].length_m == 12.0

    def test_ledger_records_layout_and_vehicles(self, single_merge):
        _, ledger = single_merge
        assert ledger.truth["layout"]["lane_width_m"] == 3.5
        assert [v["vehicle_id"] for v in ledger.truth["vehicles"]] == [1, 2]
        assert ledger.truth["peaks"] == {1: [28, 68]}

    def test_unknown_shape(self):
        with pytest.raises(InputError):
            SceneLayout(shape="spiral")


class TestMergingScene:
    def test_expected_event_count(self):
        _, ledger = gen_merging_scene(n_vehicles=5, seed=3, n_through=0, n_ramp=0)
        assert len(ledger.truth["events"]) == 5
        assert ledger.truth["discards"] == []

    def test_discards_for_truncated_and_truck(self):
        _, ledger = gen_merging_scene(n_vehicles=0, seed=3, n_through=0, n_ramp=0,
                                      n_truncated=2, n_truck_mergers=1)
        reasons = sorted(d["reason"] for d in ledger.truth["discards"])
        assert reasons == sorted([errors.NO_START_PEAK, errors.NO_START_PEAK, errors.TRUCK_INVOLVED])

    def test_reproducible(self):
        a, la = gen_merging_scene(n_vehicles=3, seed=9)
        b, lb = gen_merging_scene(n_vehicles=3, seed=9)
        assert a.track_ids() == b.track_ids()
        for tid in a.track_ids():
            np.testing.assert_array_equal(a.tracks[tid].position, b.tracks[tid].position)
        assert [e["event_id"] for e in la.truth["events"]] == [e["event_id"] for e in lb.truth["events"]]

    def test_ledger_serializes(self):
        from onramp.io import to_jsonable

        _, ledger = gen_merging_scene(n_vehicles=2, seed=1)
        data = to_jsonable(ledger.to_dict())
        assert data["kind"] == "scene"
        assert isinstance(data["truth"]["events"][0]["gaps"], list)


class TestPrimitiveFamilies:
    def test_labels_and_ids(self):
        primitives, labels, ledger = gen_primitive_families(n_per_family=4, seed=0, min_separation=10.0)
        assert len(primitives) == 12
        assert list(labels) == [0] * 4 + [1] * 4 + [2] * 4
        assert primitives[5].primitive_id == "family1/1"
        assert ledger.truth["separation_ratio"] >= 10.0

    def test_lengths_vary_with_warp(self):
        primitives, _, _ = gen_primitive_families(n_per_family=10, seed=1, min_separation=10.0)
        assert len({p.length for p in primitives}) > 3

    def test_no_warp_keeps_template_length(self):
        primitives, _, _ = gen_primitive_families(n_per_family=2, seed=1, warp=0.0, min_separation=10.0)
        assert [p.length for p in primitives] == [40, 40, 50, 50, 60, 60]

    def test_indistinct_templates_rejected(self):
        template = default_templates()[0]
        with pytest.raises(GenerationError, match="separation"):
            gen_primitive_families([template, template + 0.01], n_per_family=3, seed=0)
