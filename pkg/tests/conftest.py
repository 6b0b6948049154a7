import itertools

import numpy as np
import pytest
from scipy import stats

from bparhmm.model import (
    Dataset,
    FeatureMatrix,
    Hyperparams,
    MniwPrior,
    SamplerState,
    TimeSeries,
    TransitionState,
    VarBehavior,
    prior_eta_shapes,
    sample_log_gamma,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(d, rng, scale=1.0):
    X = rng.standard_normal((d, d + 2))
    return scale * (X @ X.T / (d + 2) + 0.5 * np.eye(d))


def random_behaviors(K, d, r, rng, a_scale=0.3):
    return [VarBehavior(a_scale * rng.standard_normal((d, d * r)), random_spd(d, rng, 0.5)) for _ in range(K)]


def random_pi(K, rng):
    return rng.dirichlet(np.ones(K), size=K)


def brute_force_loglik(targets, regressors, behaviors, pi):
    """log sum over every mode path; uniform initial distribution."""
    T, K = targets.shape[0], len(behaviors)
    dens = np.array([[stats.multivariate_normal.pdf(targets[t], behaviors[k].A @ regressors[t], behaviors[k].Sigma)
                      for k in range(K)] for t in range(T)])
    total = 0.0
    for path in itertools.product(range(K), repeat=T):
        p = 1.0 / K * dens[0, path[0]]
        for t in range(1, T):
            p *= pi[path[t - 1], path[t]] * dens[t, path[t]]
        total += p
    return np.log(total)


def path_posterior(targets, regressors, behaviors, pi):
    """Exact posterior over every path as a dict path -> probability."""
    T, K = targets.shape[0], len(behaviors)
    dens = np.array([[stats.multivariate_normal.pdf(targets[t], behaviors[k].A @ regressors[t], behaviors[k].Sigma)
                      for k in range(K)] for t in range(T)])
    out = {}
    for path in itertools.product(range(K), repeat=T):
        p = 1.0 / K * dens[0, path[0]]
        for t in range(1, T):
            p *= pi[path[t - 1], path[t]] * dens[t, path[t]]
        out[path] = p
    z = sum(out.values())
    return {k: v / z for k, v in out.items()}


def small_dataset(rng, N=2, T=12, d=1, r=1):
    return Dataset([TimeSeries(f"s{i}", rng.standard_normal((T, d))) for i in range(N)], r)


def small_state(rng, flags, T=12, d=1, r=1, gamma=1.0, kappa=2.0, alpha=1.0, dataset=None):
    flags = np.asarray(flags, dtype=bool)
    N, K = flags.shape
    ds = dataset or small_dataset(rng, N, T, d, r)
    prior = MniwPrior(dof=d + 3.0, scale=np.eye(d), mean=np.zeros((d, d * r)), col_precision=np.eye(d * r))
    log_eta = [sample_log_gamma(prior_eta_shapes(K, gamma, kappa), rng) for _ in range(N)]
    return SamplerState(
        dataset=ds,
        features=FeatureMatrix(flags),
        behaviors=random_behaviors(K, d, r, rng),
        transitions=TransitionState(log_eta, gamma, kappa),
        hyper=Hyperparams(alpha=alpha),
        prior=prior,
    )


def batch_means_z(x, target, batches=50):
    """z-score of the chain mean of ``x`` against ``target`` with a batch-means
    standard error (accounts for autocorrelation)."""
    x = np.asarray(x, dtype=float)
    n = x.size // batches * batches
    means = x[:n].reshape(batches, -1).mean(axis=1)
    se = means.std(ddof=1) / np.sqrt(batches)
    return (x[:n].mean() - target) / se


def two_sample_z(chain, independent, batches=50):
    """Geweke-style z between a dependent chain and independent draws."""
    chain = np.asarray(chain, dtype=float)
    n = chain.size // batches * batches
    means = chain[:n].reshape(batches, -1).mean(axis=1)
    var_chain = means.var(ddof=1) / batches
    ind = np.asarray(independent, dtype=float)
    var_ind = ind.var(ddof=1) / ind.size
    return (chain[:n].mean() - ind.mean()) / np.sqrt(var_chain + var_ind)
