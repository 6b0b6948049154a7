"""Forward likelihood and backward-filter / forward-sample over the mode chain.

The kernels work on a ``(T, K)`` table of emission log-densities restricted
to the active behaviors of one series, plus the matching ``K x K`` transition
matrix.  The initial mode is uniform over the active behaviors.  Each time
step is rescaled by its maximum log-emission and its normalizer; if a step
still underflows the computation is redone fully in log space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidStateError
from .model import ModeSequence


@njit(cache=True)
def _forward_scaled(log_emit, pi):
    T, K = log_emit.shape
    alpha = np.empty(K)
    new = np.empty(K)
    m = log_emit[0].max()
    s = 0.0
    for k in range(K):
        alpha[k] = np.exp(log_emit[0, k] - m) / K
        s += alpha[k]
    if not (s > 0.0) or not np.isfinite(m):
        return np.nan
    total = m + np.log(s)
    for k in range(K):
        alpha[k] /= s
    for t in range(1, T):
        for k in range(K):
            new[k] = 0.0
        for j in range(K):
            aj = alpha[j]
            if aj == 0.0:
                continue
            for k in range(K):
                new[k] += aj * pi[j, k]
        m = log_emit[t].max()
        s = 0.0
        for k in range(K):
            new[k] *= np.exp(log_emit[t, k] - m)
            s += new[k]
        if not (s > 0.0) or not np.isfinite(m):
            return np.nan
        total += m + np.log(s)
        for k in range(K):
            alpha[k] = new[k] / s
    return total


@njit(cache=True)
def _logsumexp(v):
    m = v.max()
    if not np.isfinite(m):
        return m
    s = 0.0
    for x in v:
        s += np.exp(x - m)
    return m + np.log(s)


@njit(cache=True)
def _forward_log(log_emit, log_pi, out):
    """Forward recursion in log space; fills ``out`` with normalized log alphas
    and returns the per-step log normalizers."""
    T, K = log_emit.shape
    norms = np.empty(T)
    tmp = np.empty(K)
    for k in range(K):
        out[0, k] = log_emit[0, k] - np.log(K)
    c = _logsumexp(out[0])
    norms[0] = c
    for k in range(K):
        out[0, k] -= c
    for t in range(1, T):
        for k in range(K):
            for j in range(K):
                tmp[j] = out[t - 1, j] + log_pi[j, k]
            out[t, k] = _logsumexp(tmp) + log_emit[t, k]
        c = _logsumexp(out[t])
        norms[t] = c
        for k in range(K):
            out[t, k] -= c
    return norms


@njit(cache=True)
def _draw(p, u):
    total = 0.0
    for x in p:
        total += x
    target = u * total
    acc = 0.0
    last = -1
    for k in range(p.shape[0]):
        if p[k] > 0.0:
            last = k
            acc += p[k]
            if acc > target:
                return k
    return last


@njit(cache=True)
def _sample_scaled(log_emit, pi, u):
    """Backward messages then forward sampling; returns (path, ok)."""
    T, K = log_emit.shape
    beta = np.ones((T, K))
    w = np.empty(K)
    z = np.zeros(T, dtype=np.int64)
    for t in range(T - 1, 0, -1):
        m = log_emit[t].max()
        if not np.isfinite(m):
            return z, False
        for k in range(K):
            w[k] = np.exp(log_emit[t, k] - m) * beta[t, k]
        s = 0.0
        for j in range(K):
            acc = 0.0
            for k in range(K):
                acc += pi[j, k] * w[k]
            beta[t - 1, j] = acc
            s += acc
        if not (s > 0.0):
            return z, False
        for j in range(K):
            beta[t - 1, j] /= s
    p = np.empty(K)
    m = log_emit[0].max()
    for k in range(K):
        p[k] = np.exp(log_emit[0, k] - m) * beta[0, k]
    if not (p.sum() > 0.0):
        return z, False
    z[0] = _draw(p, u[0])
    for t in range(1, T):
        m = log_emit[t].max()
        prev = z[t - 1]
        for k in range(K):
            p[k] = pi[prev, k] * np.exp(log_emit[t, k] - m) * beta[t, k]
        if not (p.sum() > 0.0):
            return z, False
        z[t] = _draw(p, u[t])
    return z, True


@njit(cache=True)
def _sample_log(log_emit, log_pi, u):
    T, K = log_emit.shape
    lbeta = np.zeros((T, K))
    w = np.empty(K)
    tmp = np.empty(K)
    z = np.zeros(T, dtype=np.int64)
    for t in range(T - 1, 0, -1):
        for k in range(K):
            w[k] = log_emit[t, k] + lbeta[t, k]
        for j in range(K):
            for k in range(K):
                tmp[k] = log_pi[j, k] + w[k]
            lbeta[t - 1, j] = _logsumexp(tmp)
        c = _logsumexp(lbeta[t - 1])
        for j in range(K):
            lbeta[t - 1, j] -= c
    lp = np.empty(K)
    p = np.empty(K)
    for k in range(K):
        lp[k] = log_emit[0, k] + lbeta[0, k]
    c = lp.max()
    for k in range(K):
        p[k] = np.exp(lp[k] - c)
    z[0] = _draw(p, u[0])
    for t in range(1, T):
        prev = z[t - 1]
        for k in range(K):
            lp[k] = log_pi[prev, k] + log_emit[t, k] + lbeta[t, k]
        c = lp.max()
        for k in range(K):
            p[k] = np.exp(lp[k] - c)
        z[t] = _draw(p, u[t])
    return z


def _log(pi):
    with np.errstate(divide="ignore"):
        return np.log(pi)


# ---------------------------------------------------------------------------
# emission tables
# ---------------------------------------------------------------------------


def emission_table(targets, regressors, behaviors, columns=None):
    """``(T - r, len(columns))`` table of Gaussian log-densities, one column per behavior."""
    if columns is None:
        columns = range(len(behaviors))
    columns = list(columns)
    out = np.empty((targets.shape[0], len(columns)))
    for c, k in enumerate(columns):
        out[:, c] = behaviors[k].log_density(targets, regressors)
    return out


def forward_from_emissions(log_emit, pi):
    """Log marginal likelihood from an emission table over the active
    behaviors and the matching transition matrix."""
    log_emit = np.ascontiguousarray(log_emit, dtype=float)
    pi = np.ascontiguousarray(pi, dtype=float)
    if log_emit.shape[1] == 0:
        raise InvalidStateError("no active behaviors")
    val = _forward_scaled(log_emit, pi)
    if np.isnan(val):
        out = np.empty_like(log_emit)
        norms = _forward_log(log_emit, _log(pi), out)
        val = float(norms.sum())
        if np.isnan(val):
            val = -np.inf
    return float(val)


def sample_path_from_emissions(log_emit, pi, rng):
    """Draw local mode indices from the joint conditional posterior."""
    log_emit = np.ascontiguousarray(log_emit, dtype=float)
    pi = np.ascontiguousarray(pi, dtype=float)
    u = rng.random(log_emit.shape[0])
    z, ok = _sample_scaled(log_emit, pi, u)
    if not ok:
        z = _sample_log(log_emit, _log(pi), u)
    return z


@dataclass
class MessageTable:
    """Normalized forward log-messages and per-step log normalizers."""

    log_messages: np.ndarray
    normalizers: np.ndarray

    @property
    def log_likelihood(self):
        return float(self.normalizers.sum())


def forward_messages(log_emit, pi):
    log_emit = np.ascontiguousarray(log_emit, dtype=float)
    out = np.empty_like(log_emit)
    norms = _forward_log(log_emit, _log(np.ascontiguousarray(pi, dtype=float)), out)
    return MessageTable(out, norms)


# ---------------------------------------------------------------------------
# series-level entry points
# ---------------------------------------------------------------------------


def _series_arrays(series, lag):
    from .model import build_lagged

    return series.observations[lag:], build_lagged(series, lag)


def _check_active(active, pi):
    active = np.asarray(active, dtype=np.int64)
    if active.size == 0:
        raise InvalidStateError("active feature set is empty")
    sub = np.asarray(pi, dtype=float)[np.ix_(active, active)]
    if np.any(sub < 0) or not np.allclose(sub.sum(axis=1), 1.0, atol=1e-9):
        raise InvalidStateError("transition rows are not distributions over the active set")
    return active, sub


def forward_log_likelihood(series, active, pi, behaviors, lag=1):
    """``log p(y_{r+1:T} | y_{1:r}, pi, behaviors)`` with the mode chain summed out.

    ``pi`` is indexed by global feature index (``K x K``); only the rows and
    columns listed in ``active`` are read.
    """
    active, sub = _check_active(active, pi)
    targets, regressors = _series_arrays(series, lag)
    log_emit = emission_table(targets, regressors, behaviors, active)
    return forward_from_emissions(log_emit, sub)


def sample_mode_sequence(series, active, pi, behaviors, rng, lag=1):
    """Block-sample the mode path of one series; states use global indices."""
    active, sub = _check_active(active, pi)
    targets, regressors = _series_arrays(series, lag)
    log_emit = emission_table(targets, regressors, behaviors, active)
    local = sample_path_from_emissions(log_emit, sub, rng)
    return ModeSequence.from_states(active[local], len(behaviors))


class EmissionCache:
    """Per-series emission tables for every behavior of a sampler state.

    Tables are ``(T_i - r, K)`` and stay column-aligned with the behavior
    list; callers append or drop columns when features are born or removed.
    """

    def __init__(self, dataset, behaviors):
        self.dataset = dataset
        self.tables = []
        for i in range(dataset.num_series):
            targets, regressors = dataset.lagged(i)
            self.tables.append(emission_table(targets, regressors, behaviors))

    def column_for(self, i, behavior):
        targets, regressors = self.dataset.lagged(i)
        return behavior.log_density(targets, regressors)

    def columns_for(self, behavior):
        return [self.column_for(i, behavior) for i in range(self.dataset.num_series)]

    def append(self, columns):
        self.tables = [np.column_stack([tab, col]) for tab, col in zip(self.tables, columns)]

    def drop(self, cols):
        keep = np.setdiff1d(np.arange(self.tables[0].shape[1]), np.atleast_1d(cols))
        self.tables = [tab[:, keep] for tab in self.tables]

    def reorder(self, order):
        self.tables = [tab[:, order] for tab in self.tables]

    def loglik(self, i, active, log_eta, extra_column=None):
        """Marginal log-likelihood of series ``i`` under feature set ``active``.

        ``extra_column`` supplies the emission column of a proposed behavior
        whose global index is ``K`` (one past the current table).
        """
        from .model import log_pi_restricted

        table = self.tables[i]
        if extra_column is not None:
            table = np.column_stack([table, extra_column])
        active = np.asarray(active, dtype=np.int64)
        pi = np.exp(log_pi_restricted(log_eta, active))
        return forward_from_emissions(table[:, active], pi)
