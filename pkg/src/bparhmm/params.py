"""Auxiliary-variable updates given features: mode sequences, transition
variables, and VAR parameters from their MNIW conditional."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, NumericFailure
from .messages import EmissionCache, sample_path_from_emissions
from .model import (
    ModeSequence,
    VarBehavior,
    log_pi_restricted,
    safe_cholesky,
    sample_log_gamma,
)


@dataclass
class SufficientStats:
    S_xx: np.ndarray  # sum of ytilde ytilde^T + K
    S_yx: np.ndarray  # sum of y ytilde^T + M K
    S_yy: np.ndarray  # sum of y y^T + M K M^T
    S_y_given_x: np.ndarray
    count: int

    @property
    def posterior_mean(self):
        """Matrix-normal mean ``S_yx inv(S_xx)``."""
        L = safe_cholesky(self.S_xx, "S_xx")
        return linalg.cho_solve((L, True), self.S_yx.T).T


def raw_sums(targets, regressors):
    return regressors.T @ regressors, targets.T @ regressors, targets.T @ targets, targets.shape[0]


def stats_from_sums(xx, yx, yy, count, prior):
    M, K = prior.mean, prior.col_precision
    S_xx = xx + K
    S_yx = yx + M @ K
    S_yy = yy + M @ K @ M.T
    L = safe_cholesky(S_xx, "S_xx")
    # Schur complement S_yy - S_yx inv(S_xx) S_yx^T
    W = linalg.solve_triangular(L, S_yx.T, lower=True, check_finite=False)
    S_cond = S_yy - W.T @ W
    S_cond = 0.5 * (S_cond + S_cond.T)
    return SufficientStats(S_xx, S_yx, S_yy, S_cond, int(count))


def compute_sufficient_stats(dataset, modes, k, prior):
    """Pool every frame (over all series) assigned to behavior ``k``."""
    d, dr = dataset.dim, dataset.dim * dataset.lag
    xx, yx, yy, n = np.zeros((dr, dr)), np.zeros((d, dr)), np.zeros((d, d)), 0
    for i, m in enumerate(modes):
        sel = m.states == k
        if not sel.any():
            continue
        targets, regressors = dataset.lagged(i)
        a, b, c, cnt = raw_sums(targets[sel], regressors[sel])
        xx, yx, yy, n = xx + a, yx + b, yy + c, n + cnt
    return stats_from_sums(xx, yx, yy, n, prior)


def all_sufficient_stats(dataset, modes, K, prior):
    """Sufficient statistics for behaviors ``0..K-1`` in one pass over the data."""
    d, dr = dataset.dim, dataset.dim * dataset.lag
    xx = np.zeros((K, dr, dr))
    yx = np.zeros((K, d, dr))
    yy = np.zeros((K, d, d))
    n = np.zeros(K, dtype=int)
    for i, m in enumerate(modes):
        targets, regressors = dataset.lagged(i)
        for k in np.unique(m.states):
            sel = m.states == k
            a, b, c, cnt = raw_sums(targets[sel], regressors[sel])
            xx[k] += a
            yx[k] += b
            yy[k] += c
            n[k] += cnt
    return [stats_from_sums(xx[k], yx[k], yy[k], n[k], prior) for k in range(K)]


# ---------------------------------------------------------------------------
# MNIW sampling
# ---------------------------------------------------------------------------


def sample_inverse_wishart(dof, scale, rng, scale_chol=None):
    """Draw from ``IW(dof, scale)`` (mean ``scale / (dof - d - 1)``) via the
    Bartlett decomposition of the matching Wishart on the precision."""
    scale = np.atleast_2d(scale)
    d = scale.shape[0]
    if not dof > d - 1:
        raise InvalidInputError("inverse-Wishart dof must exceed d - 1")
    L = safe_cholesky(scale, "inverse-Wishart scale") if scale_chol is None else scale_chol
    B = np.zeros((d, d))
    B[np.diag_indices(d)] = np.sqrt(rng.chisquare(dof - np.arange(d)))
    B[np.tril_indices(d, -1)] = rng.standard_normal(d * (d - 1) // 2)
    # precision = L^{-T} B B^T L^{-1}  =>  Sigma = X^T X with X = B^{-1} L^T
    X = linalg.solve_triangular(B, L.T, lower=True, check_finite=False)
    S = X.T @ X
    return 0.5 * (S + S.T)


def sample_matrix_normal(mean, row_cov_chol, col_precision_chol, rng):
    """``A = mean + L_row Z C^{-1}`` where ``C C^T`` is the column precision."""
    Z = rng.standard_normal(mean.shape)
    right = linalg.solve_triangular(col_precision_chol, Z.T, lower=True, trans="T", check_finite=False).T
    return mean + row_cov_chol @ right


def sample_mniw_posterior(stats, prior, rng, behavior=None):
    """``Sigma ~ IW(n + n0, S_y|x + S0)``; ``A | Sigma ~ MN(S_yx inv(S_xx), Sigma, S_xx)``."""
    try:
        scale = stats.S_y_given_x + prior.scale
        Sigma = sample_inverse_wishart(stats.count + prior.dof, scale, rng)
        L_sigma = safe_cholesky(Sigma, "sampled noise covariance", behavior)
        C = safe_cholesky(stats.S_xx, "S_xx", behavior)
        mean = linalg.cho_solve((C, True), stats.S_yx.T).T
        A = sample_matrix_normal(mean, L_sigma, C, rng)
        return VarBehavior(A, Sigma)
    except NumericFailure as exc:
        raise NumericFailure(str(exc), behavior=behavior) from None


def sample_mniw_prior(prior, rng):
    d, dr = prior.dim, prior.mean.shape[1]
    empty = stats_from_sums(np.zeros((dr, dr)), np.zeros((d, dr)), np.zeros((d, d)), 0, prior)
    return sample_mniw_posterior(empty, prior, rng)


# ---------------------------------------------------------------------------
# modes and transition variables
# ---------------------------------------------------------------------------


def sample_modes_from_cache(state, cache, rng):
    K = state.num_features
    out = []
    for i in range(state.dataset.num_series):
        active = state.features.active(i)
        pi = np.exp(log_pi_restricted(state.transitions.log_eta[i], active))
        local = sample_path_from_emissions(cache.tables[i][:, active], pi, rng)
        out.append(ModeSequence.from_states(active[local], K))
    return out


def sample_all_modes(state, rng, cache=None):
    """One block-sampled mode sequence per series."""
    if cache is None:
        cache = EmissionCache(state.dataset, state.behaviors)
    return sample_modes_from_cache(state, cache, rng)


def eta_posterior_shapes(counts, gamma, kappa):
    K = counts.shape[0]
    return gamma + kappa * np.eye(K) + counts


def sample_eta(counts, gamma, kappa, rng):
    """``log eta_jk`` with ``eta_jk ~ Gamma(gamma + kappa [j == k] + n_jk, 1)`` for every stored pair."""
    if not gamma > 0:
        raise InvalidInputError("gamma must be positive")
    return sample_log_gamma(eta_posterior_shapes(np.asarray(counts), gamma, kappa), rng)


def sample_behaviors(state, modes, rng):
    stats = all_sufficient_stats(state.dataset, modes, state.num_features, state.prior)
    return [sample_mniw_posterior(s, state.prior, rng, behavior=k) for k, s in enumerate(stats)]


def auxiliary_sweep(state, rng, cache=None):
    """Modes, then transition variables, then behaviors; updates ``state`` in place.

    Returns a fresh :class:`EmissionCache` for the new behaviors.
    """
    modes = sample_all_modes(state, rng, cache)
    tr = state.transitions
    tr.log_eta = [sample_eta(m.counts, tr.gamma, tr.kappa, rng) for m in modes]
    state.behaviors = sample_behaviors(state, modes, rng)
    state.modes = modes
    return EmissionCache(state.dataset, state.behaviors)
