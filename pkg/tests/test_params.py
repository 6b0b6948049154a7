import numpy as np
import pytest
from scipy import stats

from bparhmm.errors import InvalidInputError
from bparhmm.model import (
    Dataset,
    FeatureMatrix,
    MniwPrior,
    ModeSequence,
    TimeSeries,
    audit,
    prior_eta_shapes,
    sample_log_gamma,
)
from bparhmm.params import (
    all_sufficient_stats,
    auxiliary_sweep,
    compute_sufficient_stats,
    eta_posterior_shapes,
    raw_sums,
    sample_all_modes,
    sample_eta,
    sample_inverse_wishart,
    sample_mniw_posterior,
    sample_mniw_prior,
    stats_from_sums,
)
from bparhmm.synthetic import simulate_series

from conftest import batch_means_z, small_state


def _prior(d, r, rng=None, mean=None, dof=None):
    M = np.zeros((d, d * r)) if mean is None else mean
    return MniwPrior(dof=dof or d + 3.0, scale=np.eye(d) * 0.5 + 0.1, mean=M,
                     col_precision=0.5 * np.eye(d * r) + 0.1)


def _dataset(rng, lengths, d, r):
    return Dataset([TimeSeries(f"s{i}", rng.standard_normal((T, d))) for i, T in enumerate(lengths)], r)


# -- sufficient statistics ----------------------------------------------------


def test_empty_stats_zero_mean():
    prior = _prior(2, 1)
    d, dr = 2, 2
    s = stats_from_sums(np.zeros((dr, dr)), np.zeros((d, dr)), np.zeros((d, d)), 0, prior)
    np.testing.assert_array_equal(s.S_xx, prior.col_precision)
    np.testing.assert_array_equal(s.S_yx, 0.0)
    np.testing.assert_array_equal(s.S_yy, 0.0)
    np.testing.assert_allclose(s.S_y_given_x, 0.0, atol=1e-14)


def test_empty_stats_general_mean(rng):
    prior = _prior(2, 2, mean=rng.standard_normal((2, 4)))
    s = stats_from_sums(np.zeros((4, 4)), np.zeros((2, 4)), np.zeros((2, 2)), 0, prior)
    np.testing.assert_allclose(s.S_y_given_x, 0.0, atol=1e-12)
    np.testing.assert_allclose(s.posterior_mean, prior.mean, atol=1e-12)


def test_stats_match_naive_loops(rng):
    d, r, K = 2, 2, 3
    ds = _dataset(rng, [15, 11, 9], d, r)
    prior = _prior(d, r, mean=rng.standard_normal((d, d * r)))
    modes = [ModeSequence.from_states(rng.integers(K, size=s.length - r), K) for s in ds.series]
    for k in range(K):
        got = compute_sufficient_stats(ds, modes, k, prior)
        xx = prior.col_precision.copy()
        yx = prior.mean @ prior.col_precision
        yy = prior.mean @ prior.col_precision @ prior.mean.T
        n = 0
        for i, s in enumerate(ds.series):
            y = s.observations
            for t in range(r, s.length):
                if modes[i].states[t - r] != k:
                    continue
                yt = np.concatenate([y[t - j] for j in range(1, r + 1)])
                xx += np.outer(yt, yt)
                yx += np.outer(y[t], yt)
                yy += np.outer(y[t], y[t])
                n += 1
        cond = yy - yx @ np.linalg.inv(xx) @ yx.T
        np.testing.assert_allclose(got.S_xx, xx, atol=1e-10)
        np.testing.assert_allclose(got.S_yx, yx, atol=1e-10)
        np.testing.assert_allclose(got.S_yy, yy, atol=1e-10)
        np.testing.assert_allclose(got.S_y_given_x, cond, atol=1e-10)
        assert got.count == n
        np.testing.assert_allclose(got.posterior_mean, yx @ np.linalg.inv(xx), atol=1e-10)


def test_stats_additivity(rng):
    d, r = 1, 1
    ds = _dataset(rng, [40], d, r)
    prior = _prior(d, r)
    y, x = ds.lagged(0)
    mask = rng.random(y.shape[0]) < 0.5
    a = raw_sums(y[mask], x[mask])
    b = raw_sums(y[~mask], x[~mask])
    joint = stats_from_sums(*(p + q for p, q in zip(a, b)), prior)
    modes = [ModeSequence.from_states(np.zeros(y.shape[0], int), 1)]
    direct = compute_sufficient_stats(ds, modes, 0, prior)
    np.testing.assert_allclose(joint.S_xx, direct.S_xx)
    np.testing.assert_allclose(joint.S_y_given_x, direct.S_y_given_x)
    assert all_sufficient_stats(ds, modes, 1, prior)[0].count == direct.count


# -- MNIW draws ---------------------------------------------------------------


def test_inverse_wishart_matches_scipy(rng):
    scale = np.array([[1.0, 0.3], [0.3, 0.5]])
    dof = 6.0
    ours = np.array([sample_inverse_wishart(dof, scale, rng) for _ in range(20_000)])
    ref = stats.invwishart(df=dof, scale=scale).rvs(20_000, random_state=rng)
    for idx in [(0, 0), (0, 1), (1, 1)]:
        assert stats.ks_2samp(ours[:, idx[0], idx[1]], ref[:, idx[0], idx[1]]).pvalue > 0.01
    assert all(np.linalg.eigvalsh(S).min() > 0 for S in ours[:500])


def test_inverse_wishart_rejects_bad_dof(rng):
    with pytest.raises(InvalidInputError):
        sample_inverse_wishart(0.5, np.eye(2), rng)


def test_empty_posterior_recovers_prior_moments(rng):
    d, r, n = 2, 1, 50_000
    prior = MniwPrior(dof=9.0, scale=np.array([[1.0, 0.2], [0.2, 0.6]]), mean=np.array([[0.5, -0.2], [0.1, 0.3]]),
                      col_precision=np.array([[2.0, 0.5], [0.5, 1.0]]))
    draws = [sample_mniw_prior(prior, rng) for _ in range(n)]
    Sig = np.array([b.Sigma for b in draws])
    A = np.array([b.A for b in draws])
    ESig = prior.scale / (prior.dof - d - 1)
    np.testing.assert_allclose(Sig.mean(axis=0), ESig, rtol=0.03, atol=0.005)
    np.testing.assert_allclose(A.mean(axis=0), prior.mean, atol=0.01)
    # Cov(vec A) = inv(K) kron E[Sigma] (column-stacked vec)
    vecA = A.transpose(0, 2, 1).reshape(n, -1)
    np.testing.assert_allclose(np.cov(vecA, rowvar=False), np.kron(np.linalg.inv(prior.col_precision), ESig),
                               atol=0.02)


def test_posterior_mean_consistency(rng):
    T, a, s2 = 5000, 0.5, 0.1
    y = np.zeros(T)
    for t in range(1, T):
        y[t] = a * y[t - 1] + np.sqrt(s2) * rng.standard_normal()
    ds = Dataset([TimeSeries("a", y)])
    prior = MniwPrior.default_for(ds)
    modes = [ModeSequence.from_states(np.zeros(T - 1, int), 1)]
    st = compute_sufficient_stats(ds, modes, 0, prior)
    assert abs(st.posterior_mean[0, 0] - a) < 0.02
    draws = [sample_mniw_posterior(st, prior, rng) for _ in range(400)]
    assert abs(np.mean([b.Sigma[0, 0] for b in draws]) - s2) < 0.01


# -- transition variables -----------------------------------------------------


def test_eta_exponential_case(rng):
    draws = np.exp(sample_eta(np.zeros((300, 300), int), 1.0, 0.0, rng)).ravel()[:100_000]
    assert abs(draws.mean() - 1.0) < 0.02


def test_eta_posterior_shape_arithmetic():
    counts = np.array([[5, 1], [0, 2]])
    shapes = eta_posterior_shapes(counts, 1.0, 3.0)
    assert shapes[0, 0] == 9.0 and shapes[0, 1] == 2.0 and shapes[1, 0] == 1.0


def test_eta_rejects_bad_gamma(rng):
    with pytest.raises(InvalidInputError):
        sample_eta(np.zeros((2, 2), int), 0.0, 1.0, rng)


def test_normalized_eta_matches_dirichlet_posterior(rng):
    gamma, kappa = 0.8, 2.0
    counts = np.array([[6, 1, 0, 2], [3, 0, 0, 1], [0, 0, 9, 0], [4, 4, 0, 4]])
    active = np.array([0, 1, 3])
    n = 8000
    rows = []
    for _ in range(n):
        eta = np.exp(sample_eta(counts, gamma, kappa, rng))
        sub = eta[np.ix_(active, active)]
        rows.append(sub[0] / sub[0].sum())
    rows = np.array(rows)
    conc = gamma + counts[0, active] + kappa * (active == 0)
    direct = rng.dirichlet(conc, size=n)
    for k in range(active.size):
        assert stats.ks_2samp(rows[:, k], direct[:, k]).pvalue > 0.01


# -- modes and the auxiliary sweep -------------------------------------------


def test_sample_all_modes_counts(rng):
    state = small_state(rng, [[1, 1, 0], [0, 1, 1]], T=25)
    modes = sample_all_modes(state, rng)
    for i, m in enumerate(modes):
        assert m.counts.sum() == 25 - 1 - 1
        assert set(np.unique(m.states)) <= set(state.features.active(i))
        assert np.all(m.counts[:, ~state.features.flags[i]] == 0)


def test_auxiliary_sweep_updates_state(rng):
    state = small_state(rng, [[1, 1, 0], [0, 1, 1]], T=25)
    cache = auxiliary_sweep(state, rng)
    assert state.modes is not None and len(state.behaviors) == 3
    audit(state)
    assert cache.tables[0].shape == (24, 3)


def test_auxiliary_sweep_getting_it_right():
    """Alternate data simulation and one auxiliary sweep; prior moments of
    the behaviors and transition variables must be preserved."""
    rng = np.random.default_rng(11)
    flags = np.array([[1, 1], [0, 1]], dtype=bool)
    gamma, kappa, T = 1.0, 2.0, 12
    prior = MniwPrior(dof=7.0, scale=np.eye(1), mean=np.zeros((1, 1)), col_precision=np.eye(1))
    state = small_state(rng, flags, T=T, gamma=gamma, kappa=kappa)
    state.prior = prior
    state.behaviors = [sample_mniw_prior(prior, rng) for _ in range(2)]
    state.transitions.log_eta = [sample_log_gamma(prior_eta_shapes(2, gamma, kappa), rng) for _ in range(2)]
    F = FeatureMatrix(flags)
    rec = []
    for _ in range(6000):
        series = []
        for i in range(2):
            y, _ = simulate_series(F.active(i), state.pi(i), state.behaviors, T, 1, rng, presample="normal")
            series.append(TimeSeries(f"s{i}", y))
        state.dataset = Dataset(series, 1)
        auxiliary_sweep(state, rng)
        pi = state.pi(0)
        rec.append((state.behaviors[0].Sigma[0, 0], state.behaviors[1].A[0, 0], pi[0, 0], pi[1, 0]))
    rec = np.array(rec)
    # only the normalized rows are identified by the data; their prior is
    # Dir(gamma + kappa e_j) over the two active features
    targets = [1.0 / (7.0 - 2.0), 0.0, (gamma + kappa) / (2 * gamma + kappa), gamma / (2 * gamma + kappa)]
    for col, target in enumerate(targets):
        z = batch_means_z(rec[:, col], target)
        assert abs(z) < 3.3, (col, z)
