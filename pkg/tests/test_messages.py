import itertools

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from bparhmm.errors import InvalidStateError
from bparhmm.messages import (
    EmissionCache,
    emission_table,
    forward_from_emissions,
    forward_log_likelihood,
    forward_messages,
    sample_mode_sequence,
    sample_path_from_emissions,
)
from bparhmm.model import Dataset, TimeSeries, VarBehavior, build_lagged, mode_path_log_prob

from conftest import brute_force_loglik, path_posterior, random_behaviors, random_pi


def test_single_state_is_iid_gaussian():
    s = TimeSeries("a", np.zeros((3, 1)))
    ll = forward_log_likelihood(s, [0], np.ones((1, 1)), [VarBehavior([[0.0]], [[1.0]])])
    # two conditioned frames, each log N(0; 0, 1)
    assert ll == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert ll == pytest.approx(-1.8378770664, abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_forward_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    d, r, K = 1 + seed % 2, 1 + seed % 3 // 2, 2 + seed % 2
    T = r + 4
    s = TimeSeries("a", rng.standard_normal((T, d)))
    beh = random_behaviors(K, d, r, rng)
    pi = random_pi(K, rng)
    ll = forward_log_likelihood(s, np.arange(K), pi, beh, lag=r)
    y, x = s.observations[r:], build_lagged(s, r)
    assert abs(ll - brute_force_loglik(y, x, beh, pi)) < 1e-8


def test_relabeling_symmetry(rng):
    K, T = 3, 30
    s = TimeSeries("a", rng.standard_normal((T, 2)))
    beh = random_behaviors(K, 2, 1, rng)
    pi = random_pi(K, rng)
    base = forward_log_likelihood(s, np.arange(K), pi, beh)
    perm = np.array([2, 0, 1])
    inv = np.argsort(perm)
    pi_p = pi[np.ix_(perm, perm)]
    beh_p = [beh[k] for k in perm]
    assert forward_log_likelihood(s, inv[np.arange(K)], pi_p, beh_p) == pytest.approx(base, abs=1e-12)


def test_padding_with_inactive_behaviors(rng):
    K, T = 2, 40
    s = TimeSeries("a", rng.standard_normal((T, 1)))
    beh = random_behaviors(K, 1, 1, rng)
    pi = random_pi(K, rng)
    base = forward_log_likelihood(s, [0, 1], pi, beh)
    big = np.zeros((5, 5))
    big[np.ix_([1, 3], [1, 3])] = pi
    padded = random_behaviors(5, 1, 1, rng)
    padded[1], padded[3] = beh
    assert forward_log_likelihood(s, [1, 3], big, padded) == pytest.approx(base, abs=1e-12)


def test_long_series_is_finite(rng):
    s = TimeSeries("a", rng.standard_normal((10_000, 1)) * 5)
    beh = random_behaviors(3, 1, 1, rng)
    ll = forward_log_likelihood(s, [0, 1, 2], random_pi(3, rng), beh)
    assert np.isfinite(ll)


def test_scaled_and_log_space_agree(rng):
    y, x = rng.standard_normal((200, 2)), rng.standard_normal((200, 2))
    beh = random_behaviors(3, 2, 1, rng)
    table = emission_table(y, x, beh)
    pi = random_pi(3, rng)
    msgs = forward_messages(table, pi)
    assert msgs.log_likelihood == pytest.approx(forward_from_emissions(table, pi), abs=1e-9)
    np.testing.assert_allclose(logsumexp(msgs.log_messages, axis=1), 0.0, atol=1e-12)


def test_underflow_falls_back_to_log_space():
    # the only path from state 0 into the favoured state is forbidden
    table = np.array([[0.0, -1000.0], [-800.0, 0.0]])
    pi = np.array([[1.0, 0.0], [0.5, 0.5]])
    paths = [
        np.log(0.5) + 0.0 + np.log(1.0) - 800.0,
        np.log(0.5) - 1000.0 + np.log(0.5) - 800.0,
        np.log(0.5) - 1000.0 + np.log(0.5) + 0.0,
    ]
    assert forward_from_emissions(table, pi) == pytest.approx(logsumexp(paths), abs=1e-9)
    z = sample_path_from_emissions(table, pi, np.random.default_rng(0))
    assert tuple(z) in {(0, 0), (1, 0), (1, 1)}


def test_empty_active_set():
    s = TimeSeries("a", np.zeros((4, 1)))
    with pytest.raises(InvalidStateError):
        forward_log_likelihood(s, [], np.ones((1, 1)), [VarBehavior([[0.0]], [[1.0]])])


def test_bad_transition_rows():
    s = TimeSeries("a", np.zeros((4, 1)))
    beh = [VarBehavior([[0.0]], [[1.0]])] * 2
    with pytest.raises(InvalidStateError):
        forward_log_likelihood(s, [0, 1], np.array([[0.5, 0.2], [0.5, 0.5]]), beh)


# -- block sampling -----------------------------------------------------------


def test_single_state_path_is_constant(rng):
    s = TimeSeries("a", rng.standard_normal((20, 1)))
    beh = random_behaviors(3, 1, 1, rng)
    m = sample_mode_sequence(s, [2], np.eye(3), beh, rng)
    assert np.all(m.states == 2)
    assert m.counts[2, 2] == 20 - 1 - 1 and m.counts.sum() == 18


def test_zero_mass_state_never_visited(rng):
    s = TimeSeries("a", rng.standard_normal((60, 1)))
    beh = random_behaviors(3, 1, 1, rng)
    pi = np.array([[0.6, 0.4, 0.0], [0.3, 0.7, 0.0], [0.5, 0.5, 0.0]])
    for _ in range(200):
        z = sample_mode_sequence(s, [0, 1, 2], pi, beh, rng).states
        # no row puts mass on state 2, so only the initial frame can use it
        assert not np.any(z[1:] == 2)
        assert np.isfinite(mode_path_log_prob(z, np.full(3, -np.log(3)), np.log(pi + 1e-300)))


def test_sampled_paths_match_enumeration(rng):
    T, K = 3, 2
    y, x = rng.standard_normal((T, 1)), rng.standard_normal((T, 1))
    beh = [VarBehavior([[0.8]], [[0.3]]), VarBehavior([[-0.5]], [[1.0]])]
    pi = np.array([[0.7, 0.3], [0.4, 0.6]])
    exact = path_posterior(y, x, beh, pi)
    table = emission_table(y, x, beh)
    n = 20_000
    counts = dict.fromkeys(exact, 0)
    for _ in range(n):
        counts[tuple(sample_path_from_emissions(table, pi, rng))] += 1
    obs = np.array([counts[p] for p in exact])
    exp = np.array([exact[p] for p in exact]) * n
    assert stats.chisquare(obs, exp).pvalue > 0.001


def test_sampled_paths_are_feasible(rng):
    table = rng.normal(scale=50.0, size=(500, 4))
    pi = random_pi(4, rng)
    pi[0, 3] = pi[3, 0] = 0.0
    pi /= pi.sum(axis=1, keepdims=True)
    z = sample_path_from_emissions(table, pi, rng)
    assert np.all(pi[z[:-1], z[1:]] > 0)


def test_sampling_is_deterministic_under_seed(rng):
    table = rng.standard_normal((50, 3))
    pi = random_pi(3, rng)
    a = sample_path_from_emissions(table, pi, np.random.default_rng(7))
    b = sample_path_from_emissions(table, pi, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


# -- emission cache -----------------------------------------------------------


def test_emission_cache_matches_direct(rng):
    ds = Dataset([TimeSeries("a", rng.standard_normal((30, 1))), TimeSeries("b", rng.standard_normal((25, 1)))])
    beh = random_behaviors(3, 1, 1, rng)
    cache = EmissionCache(ds, beh)
    log_eta = rng.standard_normal((3, 3))
    active = np.array([0, 2])
    pi = np.zeros((3, 3))
    sub = np.exp(log_eta[np.ix_(active, active)])
    pi[np.ix_(active, active)] = sub / sub.sum(axis=1, keepdims=True)
    direct = forward_log_likelihood(ds.series[1], active, pi, beh)
    assert cache.loglik(1, active, log_eta) == pytest.approx(direct, abs=1e-12)
    new = random_behaviors(1, 1, 1, rng)[0]
    big_eta = rng.standard_normal((4, 4))
    with_extra = cache.loglik(0, np.array([1, 3]), big_eta, extra_column=cache.column_for(0, new))
    cache.append(cache.columns_for(new))
    assert cache.loglik(0, np.array([1, 3]), big_eta) == with_extra
    cache.drop([0])
    assert cache.tables[0].shape == (29, 3)
