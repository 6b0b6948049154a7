"""Hyperparameter moves: conjugate draw of alpha; Metropolis steps on gamma
and kappa with gamma proposals of fixed variance centred on the current value.

The gamma and kappa targets condition only on the normalized transition rows
over each series' active features.  After those moves
:func:`refresh_transition_scales` redraws the parts of ``eta`` that the rows
do not determine (row totals and entries touching inactive features), which
keeps the joint update exact.
"""
from __future__ import annotations

import logging
from math import lgamma, log

import numpy as np
from scipy.special import gammaln

from .model import log_pi_restricted, prior_eta_shapes, sample_log_gamma

logger = logging.getLogger(__name__)


def harmonic(n):
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def alpha_posterior(K, N, a_alpha, b_alpha):
    """(shape, rate) of the conditional of alpha given the feature matrix."""
    return a_alpha + K, b_alpha + harmonic(N)


def sample_alpha(K, N, a_alpha, b_alpha, rng):
    shape, rate = alpha_posterior(K, N, a_alpha, b_alpha)
    return float(rng.gamma(shape, 1.0 / rate))


def restricted_log_pis(log_eta, F):
    """Per-series ``K_i x K_i`` log transition rows over active features."""
    return [log_pi_restricted(le, F.active(i)) for i, le in enumerate(log_eta)]


def log_f_gamma(gamma, kappa, log_pis):
    """Log Dirichlet density of all active transition rows, one term per row."""
    total = 0.0
    for lp in log_pis:
        Ki = lp.shape[0]
        norm = lgamma(gamma * Ki + kappa) - (Ki - 1) * lgamma(gamma) - lgamma(gamma + kappa)
        conc = gamma + kappa * np.eye(Ki)
        total += Ki * norm + float(np.sum((conc - 1.0) * lp))
    return total


def log_f_kappa(gamma, kappa, log_pis):
    """The kappa-dependent part of :func:`log_f_gamma`; reads only self-transitions."""
    total = 0.0
    for lp in log_pis:
        Ki = lp.shape[0]
        total += Ki * (lgamma(gamma * Ki + kappa) - lgamma(gamma + kappa))
        total += (gamma + kappa - 1.0) * float(np.trace(lp))
    return total


def proposal_shape_rate(x, sigma2):
    return x * x / sigma2, x / sigma2


def compact_log_ratio(x_new, x_old, log_f_new, log_f_old, a, b, sigma2):
    """Log acceptance ratio for a gamma-proposal move, in the compact form
    that folds the gamma prior ratio and the proposal ratio together."""
    th = x_old * x_old / sigma2
    th_new = x_new * x_new / sigma2
    return (log_f_new - log_f_old
            + gammaln(th) - gammaln(th_new)
            + (th_new - th - a) * log(x_old)
            - (th - th_new - a) * log(x_new)
            - (x_new - x_old) * b
            + (th - th_new) * log(sigma2))


def _propose(x, sigma2, rng):
    shape, rate = proposal_shape_rate(x, sigma2)
    return float(np.exp(sample_log_gamma(np.array(shape), rng)) / rate)


def _mh_step(x, sigma2, a, b, log_f, rng, name):
    x_new = _propose(x, sigma2, rng)
    u = rng.random()
    if not (x_new > 0 and np.isfinite(x_new)):
        return x, False
    lf_new = log_f(x_new)
    lf_old = log_f(x)
    if not (np.isfinite(lf_new) and np.isfinite(lf_old)):
        logger.warning("non-finite %s likelihood term; proposal rejected", name)
        return x, False
    log_r = compact_log_ratio(x_new, x, lf_new, lf_old, a, b, sigma2)
    if log(u) < log_r:
        return x_new, True
    return x, False


def mh_gamma(gamma, kappa, log_pis, hyper, rng, log_f=None):
    """One Metropolis step on gamma given kappa.  Returns ``(gamma, accepted)``.

    ``log_f`` overrides the likelihood term (``lambda g: 0.0`` gives a prior-only chain).
    """
    if log_f is None:
        def log_f(g):
            return log_f_gamma(g, kappa, log_pis)
    return _mh_step(gamma, hyper.sigma2_gamma, hyper.a_gamma, hyper.b_gamma, log_f, rng, "gamma")


def mh_kappa(gamma, kappa, log_pis, hyper, rng, log_f=None):
    """One Metropolis step on kappa given gamma.  Returns ``(kappa, accepted)``."""
    if log_f is None:
        def log_f(k):
            return log_f_kappa(gamma, k, log_pis)
    return _mh_step(kappa, hyper.sigma2_kappa, hyper.a_kappa, hyper.b_kappa, log_f, rng, "kappa")


def refresh_transition_scales(log_eta, log_pis, F, gamma, kappa, rng):
    """Redraw ``log eta`` given the normalized active rows and (gamma, kappa).

    Active rows get a fresh total ``Gamma(K_i gamma + kappa)`` times the fixed
    normalized row; every entry touching an inactive feature is a fresh prior draw.
    """
    out = []
    for i, (le, lp) in enumerate(zip(log_eta, log_pis)):
        K = le.shape[0]
        active = F.active(i)
        fresh = sample_log_gamma(prior_eta_shapes(K, gamma, kappa), rng)
        totals = sample_log_gamma(np.full(active.size, gamma * active.size + kappa), rng)
        fresh[np.ix_(active, active)] = totals[:, None] + lp
        out.append(fresh)
    return out


def transition_hyper_sweep(state, rng, flat=False):
    """gamma, then kappa, then the transition-scale refresh.

    ``flat=True`` drops the likelihood terms (prior-only runs).
    """
    tr = state.transitions
    F = state.features
    log_pis = restricted_log_pis(tr.log_eta, F)
    zero = (lambda x: 0.0) if flat else None
    tr.gamma, _ = mh_gamma(tr.gamma, tr.kappa, log_pis, state.hyper, rng, log_f=zero)
    tr.kappa, _ = mh_kappa(tr.gamma, tr.kappa, log_pis, state.hyper, rng, log_f=zero)
    tr.log_eta = refresh_transition_scales(tr.log_eta, log_pis, F, tr.gamma, tr.kappa, rng)
    return state
