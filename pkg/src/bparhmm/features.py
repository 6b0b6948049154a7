"""Feature updates for one series at a time.

Shared features (used by at least one other series) get a Metropolis flip
against the IBP conditional ``m_k^{-i} / N``; features unique to the series
are added or removed by a birth/death reversible-jump move whose prior on the
unique count is ``Poisson(alpha / N)``.  Likelihoods marginalize the mode
sequence.  A move that would leave a series with no active feature is
rejected outright.

All functions mutate ``state`` (and the likelihood cache) only when a
proposal is accepted.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log
from typing import Optional

import numpy as np

from .errors import InvalidStateError
from .model import FeatureMatrix, prior_eta_shapes, sample_log_gamma
from .params import sample_mniw_prior


class FlatLikelihood:
    """Likelihood stand-in that ignores the data (log-likelihood 0).

    Used for prior-only runs; it has the same interface as
    :class:`~bparhmm.messages.EmissionCache`.
    """

    def loglik(self, i, active, log_eta, extra_column=None):
        return 0.0

    def column_for(self, i, behavior):
        return None

    def columns_for(self, behavior):
        return None

    def append(self, columns):
        pass

    def drop(self, cols):
        pass

    def reorder(self, order):
        pass


def log_poisson(n, lam):
    return n * log(lam) - lam - lgamma(n + 1)


def shared_log_ratio(m_minus, N, ll1, ll0):
    """``log rho*`` with ``rho* = m/(N - m) * l1/l0``."""
    return log(m_minus) - log(N - m_minus) + ll1 - ll0


def shared_flip_probability(f, m_minus, N, ll1, ll0):
    lr = shared_log_ratio(m_minus, N, ll1, ll0)
    if f == 0:
        return float(np.exp(min(lr, 0.0)))
    return float(np.exp(min(-lr, 0.0)))


def birth_proposal_prob(n):
    """Probability of proposing a birth when ``n`` unique features exist."""
    return 1.0 if n == 0 else 0.5


def death_proposal_prob(n):
    """Total probability of proposing some death when ``n >= 1`` unique features exist."""
    return 0.0 if n == 0 else 0.5


def birth_log_ratio(ll_new, ll_old, n, lam):
    """Log acceptance ratio for ``n -> n + 1`` unique features."""
    return (ll_new - ll_old + log_poisson(n + 1, lam) - log_poisson(n, lam)
            + log(death_proposal_prob(n + 1)) - log(birth_proposal_prob(n)))


def death_log_ratio(ll_new, ll_old, n, lam):
    """Log acceptance ratio for ``n -> n - 1`` unique features."""
    return (ll_new - ll_old + log_poisson(n - 1, lam) - log_poisson(n, lam)
            + log(birth_proposal_prob(n - 1)) - log(death_proposal_prob(n)))


def unique_features(F, i):
    counts = F.counts
    row = F.flags[i]
    return np.flatnonzero(row & (counts - row == 0))


def shared_features(F, i):
    counts = F.counts - F.flags[i]
    return np.flatnonzero(counts >= 1)


def current_loglik(state, lik, i):
    return lik.loglik(i, state.features.active(i), state.transitions.log_eta[i])


def sample_shared_feature(i, k, state, rng, lik, ll_current=None):
    """One Metropolis flip of ``f_ik``.  Returns ``(accepted, loglik_after)``."""
    F = state.features
    N = F.num_series
    f = int(F.flags[i, k])
    m_minus = int(F.counts[k]) - f
    if m_minus < 1:
        raise InvalidStateError(f"feature {k} is not shared with another series")
    log_eta = state.transitions.log_eta[i]
    if ll_current is None:
        ll_current = lik.loglik(i, F.active(i), log_eta)
    row = F.flags[i].copy()
    row[k] = not f
    if not row.any():
        return False, ll_current
    ll_prop = lik.loglik(i, np.flatnonzero(row), log_eta)
    ll1, ll0 = (ll_prop, ll_current) if f == 0 else (ll_current, ll_prop)
    lr = shared_log_ratio(m_minus, N, ll1, ll0)
    log_accept = lr if f == 0 else -lr
    if log(rng.random()) < log_accept:
        state.features = F.with_flag(i, k, not f)
        state.modes = None
        return True, ll_prop
    return False, ll_current


@dataclass
class BirthDeathProposal:
    kind: str  # "birth" or "death"
    target: Optional[int]
    row: np.ndarray
    behavior: object = None
    log_eta: Optional[list] = None


def _extend_log_eta(log_eta, gamma, kappa, rng):
    """Append one row and column of prior draws to a ``K x K`` matrix."""
    K = log_eta.shape[0]
    shapes = prior_eta_shapes(K + 1, gamma, kappa)
    fresh = sample_log_gamma(shapes, rng)
    fresh[:K, :K] = log_eta
    return fresh


def remove_features(state, cols, lik):
    cols = np.atleast_1d(np.asarray(cols, dtype=int))
    if cols.size == 0:
        return
    keep = np.setdiff1d(np.arange(state.num_features), cols)
    state.features = state.features.without_columns(cols)
    state.behaviors = [state.behaviors[k] for k in keep]
    state.transitions.log_eta = [le[np.ix_(keep, keep)] for le in state.transitions.log_eta]
    state.modes = None
    lik.drop(cols)


def move_last_feature(state, pos, lik):
    """Move the last feature column to position ``pos`` in every aligned structure."""
    K = state.num_features
    order = np.concatenate([np.arange(pos), [K - 1], np.arange(pos, K - 1)])
    state.features = FeatureMatrix(state.features.flags[:, order])
    state.behaviors = [state.behaviors[k] for k in order]
    state.transitions.log_eta = [le[np.ix_(order, order)] for le in state.transitions.log_eta]
    lik.reorder(order)


def drop_unused_features(state, lik):
    unused = np.flatnonzero(state.features.counts == 0)
    remove_features(state, unused, lik)
    return unused


def birth_death_move(i, state, rng, lik, ll_current=None):
    """One birth/death proposal on the unique features of series ``i``.

    Returns ``(proposal, accepted, loglik_after)``.
    """
    F = state.features
    N, K = F.num_series, F.num_features
    unique = unique_features(F, i)
    n = unique.size
    lam = state.hyper.alpha / N
    tr = state.transitions
    if ll_current is None:
        ll_current = lik.loglik(i, F.active(i), tr.log_eta[i])
    birth = n == 0 or rng.random() < 0.5
    if birth:
        theta = sample_mniw_prior(state.prior, rng)
        new_eta = [_extend_log_eta(le, tr.gamma, tr.kappa, rng) for le in tr.log_eta]
        row = np.append(F.flags[i], True)
        prop = BirthDeathProposal("birth", K, row, theta, new_eta)
        ll_prop = lik.loglik(i, np.flatnonzero(row), new_eta[i], extra_column=lik.column_for(i, theta))
        log_r = birth_log_ratio(ll_prop, ll_current, n, lam)
    else:
        target = int(unique[rng.integers(n)])
        row = F.flags[i].copy()
        row[target] = False
        prop = BirthDeathProposal("death", target, row)
        if not row.any():
            return prop, False, ll_current
        ll_prop = lik.loglik(i, np.flatnonzero(row), tr.log_eta[i])
        log_r = death_log_ratio(ll_prop, ll_current, n, lam)
    if not log(rng.random()) < log_r:
        return prop, False, ll_current
    if birth:
        state.features = F.with_new_column([i])
        state.behaviors = state.behaviors + [prop.behavior]
        tr.log_eta = prop.log_eta
        state.modes = None
        lik.append(lik.columns_for(prop.behavior))
        # a uniformly placed column keeps the move reversible with respect to
        # the column-exchangeable target under the ordered shared-flip sweep
        pos = int(rng.integers(K + 1))
        if pos != K:
            move_last_feature(state, pos, lik)
        prop.target = pos
    else:
        remove_features(state, [prop.target], lik)
    return prop, True, ll_prop


def feature_sweep(state, rng, lik):
    """Shared flips (ascending ``k``) then one birth/death move, for each series in order."""
    for i in range(state.dataset.num_series):
        ll = current_loglik(state, lik, i)
        for k in shared_features(state.features, i):
            _, ll = sample_shared_feature(i, int(k), state, rng, lik, ll)
        _, _, ll = birth_death_move(i, state, rng, lik, ll)
        drop_unused_features(state, lik)
    return state
