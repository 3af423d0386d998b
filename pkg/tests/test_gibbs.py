"""Tests for the Direct Gibbs sampler, BIC sweep and decoders."""

import itertools
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from onramp.errors import InputError, ModelStateError
from onramp.nhmm import (
    FitConfig,
    NhmmParams,
    _Chain,
    bic,
    covariate_significance,
    decode_states,
    decode_viterbi,
    gibbs_fit,
    log_transition_matrices,
    select_k,
)
from onramp.synthetic import gen_nhmm_sequences
from tests.conftest import make_event


@pytest.fixture
def two_state_events(two_state_params):
    events, ledger = gen_nhmm_sequences(two_state_params, n_sequences=3, T=60, seed=21)
    return events, ledger


@pytest.fixture
def three_state_events():
    params = NhmmParams(
        mu=np.array([[0.0, 10.0, 0.0, 0.0], [0.5, 20.0, 0.2, 0.5], [1.0, 30.0, -0.2, -0.5]]),
        sigma=np.stack([0.25 * np.eye(4)] * 3),
        xi=np.array([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [-3.0, -3.0, 0.0]]),
        rho=np.array([[0.5, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, -0.5, 0.0, 0.0, 0.0, 0.0], [0.0] * 6]),
        pi0=np.full(3, 1.0 / 3.0),
    )
    return gen_nhmm_sequences(params, n_sequences=3, T=80, seed=8)


def _accuracy_up_to_relabeling(decoded, truth, n_states):
    return max(np.mean(np.asarray(perm)[decoded] == truth)
               for perm in itertools.permutations(range(n_states)))


class TestGibbsFit:
    def test_shapes(self, two_state_events, fast_fit):
        events, _ = two_state_events
        samples = gibbs_fit(events, 2, fast_fit)
        assert samples.n_draws == fast_fit.n_draws == 40
        assert samples.mu.shape == (40, 2, 4)
        assert samples.sigma.shape == (40, 2, 4, 4)
        assert samples.xi.shape == (40, 2, 2)
        assert samples.rho.shape == (40, 2, 6)
        assert [s.shape for s in samples.states] == [(40, 60)] * 3
        assert samples.event_ids == ("syn-0000", "syn-0001", "syn-0002")

    def test_reference_state_and_probabilities(self, two_state_events, fast_fit):
        events, _ = two_state_events
        samples = gibbs_fit(events, 2, fast_fit)
        assert np.all(samples.xi[:, :, -1] == 0.0)
        assert np.all(samples.rho[:, -1, :] == 0.0)
        np.testing.assert_allclose(samples.pi0.sum(axis=1), 1.0)
        for s in range(samples.n_draws):
            assert np.all(np.linalg.eigvalsh(samples.sigma[s]) > 0.0)

    def test_canonical_labels_ordered_by_speed(self, two_state_events, fast_fit):
        events, _ = two_state_events
        samples = gibbs_fit(events, 2, fast_fit)
        assert np.all(samples.mu[:, 0, 1] <= samples.mu[:, 1, 1])

    def test_recovers_separated_states(self, two_state_events, two_state_params):
        events, ledger = two_state_events
        config = FitConfig(iterations=150, burn_in=50, thinning=1, seed=5)
        samples = gibbs_fit(events, 2, config)
        mean = samples.posterior_mean()
        np.testing.assert_allclose(mean.mu, two_state_params.mu, atol=0.5)
        truth = ledger.truth["states"]
        for n in range(3):
            accuracy = np.mean(decode_states(samples, n) == truth[n])
            assert accuracy > 0.95

    def test_deterministic_given_seed(self, two_state_events, fast_fit):
        events, _ = two_state_events
        a = gibbs_fit(events, 2, fast_fit)
        b = gibbs_fit(events, 2, fast_fit)
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.rho, b.rho)
        np.testing.assert_array_equal(a.states[0], b.states[0])

    def test_seed_changes_chain(self, two_state_events, fast_fit):
        events, _ = two_state_events
        a = gibbs_fit(events, 2, fast_fit)
        b = gibbs_fit(events, 2, FitConfig(iterations=60, burn_in=20, thinning=1, seed=4))
        assert not np.array_equal(a.rho, b.rho)

    def test_homogeneous_has_no_regressors(self, two_state_events, fast_fit):
        events, _ = two_state_events
        config = FitConfig(iterations=60, burn_in=20, thinning=1, seed=3, homogeneous=True)
        samples = gibbs_fit(events, 2, config)
        assert samples.rho.shape == (40, 2, 0)
        assert samples.covariate_names == ()

    def test_single_state(self, two_state_events, fast_fit):
        events, _ = two_state_events
        samples = gibbs_fit(events, 1, fast_fit)
        assert np.all(samples.states[0] == 0)
        np.testing.assert_allclose(samples.pi0, 1.0)

    def test_single_event_input(self, fast_fit):
        samples = gibbs_fit(make_event(T=30), 2, fast_fit)
        assert samples.event_ids == ("7-50",)

    def test_too_short_sequence(self, fast_fit):
        with pytest.raises(InputError, match="at least 10"):
            gibbs_fit(make_event(T=9), 2, fast_fit)

    def test_non_finite_observation(self, fast_fit):
        event = make_event(T=20)
        event.O[3, 1] = np.nan
        with pytest.raises(InputError, match="non-finite"):
            gibbs_fit(event, 2, fast_fit)

    def test_state_count_range(self, fast_fit):
        with pytest.raises(InputError):
            gibbs_fit(make_event(), 0, fast_fit)

    def test_constant_covariate_dropped(self, fast_fit):
        # make_event holds the ramp density fixed
        samples = gibbs_fit(make_event(T=30), 2, fast_fit)
        assert "d" not in samples.covariate_names
        assert samples.rho.shape[2] == 5

    def test_empty_state_flagged_after_patience(self):
        event = make_event(T=30)
        config = FitConfig(iterations=60, burn_in=20, thinning=1, seed=3, degenerate_patience=2)
        chain = _Chain([event], [np.zeros((30, 0))], 2, config, np.random.default_rng(0))
        chain.q_list = [np.zeros(30, dtype=np.int64)]
        for _ in range(2):
            chain.update_emissions()
        assert chain.degenerate == set()
        chain.update_emissions()
        assert chain.degenerate == {1}

    def test_occupied_states_not_flagged(self, two_state_events, fast_fit):
        events, _ = two_state_events
        samples = gibbs_fit(events, 2, fast_fit)
        assert not samples.degenerate
        assert samples.chain_metadata()["degenerate_states"] == []


class TestRecovery:
    def test_three_states(self, three_state_events):
        events, ledger = three_state_events
        samples = gibbs_fit(events, 3, FitConfig(iterations=120, burn_in=40, thinning=1, seed=6))
        assert not samples.degenerate
        for n, truth in enumerate(ledger.truth["states"]):
            assert _accuracy_up_to_relabeling(decode_states(samples, n), truth, 3) >= 0.9

    def test_strong_covariate_weight_flagged_with_sign(self):
        rho = np.zeros((2, 6))
        rho[0, 0] = 2.0
        params = NhmmParams(
            mu=np.array([[0.0, 10.0, 0.0, 0.0], [0.5, 20.0, 0.2, 0.5]]),
            sigma=np.stack([0.25 * np.eye(4)] * 2),
            xi=np.array([[1.0, 0.0], [-1.0, 0.0]]),
            rho=rho,
            pi0=np.array([0.5, 0.5]),
        )
        events, _ = gen_nhmm_sequences(params, n_sequences=4, T=100, seed=13)
        samples = gibbs_fit(events, 2, FitConfig(iterations=300, burn_in=100, thinning=1, seed=2))
        sig = covariate_significance(samples, level=0.95)
        assert sig.significant[0, 0]
        assert sig.lower[0, 0] > 0.0
        assert sig.mean_std[0, 0] > 0.0 and sig.mean_raw[0, 0] > 0.0
        assert int(sig.significant[0, 1:].sum()) <= 1
        assert not sig.significant[1].any()

    def test_affine_covariate_rescaling_changes_nothing(self, two_state_events):
        events, _ = two_state_events
        shifted = [replace(e, X=10.0 * e.X + 5.0) for e in events]
        config = FitConfig(iterations=140, burn_in=40, thinning=1, seed=9)
        a = gibbs_fit(events, 2, config)
        b = gibbs_fit(shifted, 2, config)
        for n in range(len(events)):
            np.testing.assert_array_equal(decode_states(a, n), decode_states(b, n))
        np.testing.assert_allclose(b.rho, a.rho, rtol=1e-6, atol=1e-8)
        sig_a, sig_b = covariate_significance(a), covariate_significance(b)
        np.testing.assert_array_equal(sig_a.significant, sig_b.significant)
        np.testing.assert_allclose(sig_b.mean_raw, sig_a.mean_raw / 10.0, rtol=1e-6, atol=1e-8)

    def test_homogeneous_fit_has_constant_transitions(self, two_state_params):
        truth_params = replace(two_state_params, rho=np.zeros_like(two_state_params.rho))
        events, ledger = gen_nhmm_sequences(truth_params, n_sequences=4, T=80, seed=17)
        config = FitConfig(iterations=150, burn_in=50, thinning=1, seed=4, homogeneous=True)
        samples = gibbs_fit(events, 2, config)
        mean = samples.posterior_mean()
        log_A = log_transition_matrices(mean, np.zeros((80, 0)))
        np.testing.assert_allclose(log_A, np.broadcast_to(log_A[0], log_A.shape))
        expected = np.exp(log_transition_matrices(truth_params, np.zeros((1, 6)))[0])
        np.testing.assert_allclose(np.exp(log_A[0]), expected, atol=0.08)
        for n, truth in enumerate(ledger.truth["states"]):
            assert np.mean(decode_states(samples, n) == truth) > 0.95


class TestDecoders:
    def test_viterbi_agrees_on_separated_states(self, two_state_events):
        events, ledger = two_state_events
        samples = gibbs_fit(events, 2, FitConfig(iterations=100, burn_in=40, thinning=1, seed=2))
        path = decode_viterbi(samples, events, 1)
        assert np.mean(path == ledger.truth["states"][1]) > 0.95


class TestBic:
    def test_components(self, two_state_events, fast_fit):
        events, _ = two_state_events
        samples = gibbs_fit(events, 2, fast_fit)
        value, loglik, p = bic(samples, events)
        assert p == 37
        assert value == pytest.approx(-2.0 * loglik + 37 * math.log(180))

    def test_select_k_prefers_two_states(self, two_state_events):
        events, _ = two_state_events
        config = FitConfig(iterations=80, burn_in=30, thinning=1, seed=1)
        selection = select_k(events, range(1, 3), config)
        assert selection.best_k == 2
        assert [row["k"] for row in selection.table] == [1, 2]
        assert [row["selected"] for row in selection.table] == [False, True]
        assert set(selection.fits) == {1, 2}

    def test_select_k_finds_three_states(self, three_state_events):
        events, _ = three_state_events
        config = FitConfig(iterations=80, burn_in=30, thinning=1, seed=1)
        selection = select_k(events, range(2, 5), config)
        assert selection.best_k == 3
        bics = {row["k"]: row["bic"] for row in selection.table}
        assert bics[3] < bics[2]

    def test_degenerate_fits_skipped(self, mocker):
        fits = {k: SimpleNamespace(degenerate=(k == 1), n_states=k) for k in (1, 2)}
        mocker.patch("onramp.nhmm.gibbs_fit", side_effect=lambda seqs, k, config: fits[k])
        mocker.patch("onramp.nhmm.bic", side_effect=lambda s, seqs: (10.0 * (3 - s.n_states), 0.0, 1))
        selection = select_k([make_event()], range(1, 3))
        assert selection.best_k == 2

    def test_all_degenerate(self, mocker):
        mocker.patch("onramp.nhmm.gibbs_fit", return_value=SimpleNamespace(degenerate=True))
        mocker.patch("onramp.nhmm.bic", return_value=(1.0, 0.0, 1))
        with pytest.raises(ModelStateError, match="degenerate"):
            select_k([make_event()], range(1, 3))

    def test_tie_goes_to_smaller_k(self, mocker):
        mocker.patch("onramp.nhmm.gibbs_fit", return_value=SimpleNamespace(degenerate=False))
        mocker.patch("onramp.nhmm.bic", return_value=(5.0, 0.0, 1))
        assert select_k([make_event()], range(2, 5)).best_k == 2
