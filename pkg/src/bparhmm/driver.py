"""Chain orchestration: initialization, the per-iteration sweep schedule,
RNG streams, sample emission and checkpoints.

One iteration runs, in order: the feature sweep (shared flips and a
birth/death move per series, then cleanup), a conjugate draw of ``alpha``,
the auxiliary-variable sweep (modes, transition variables, behaviors), and
one Metropolis move each on ``gamma`` and ``kappa``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from math import lgamma, log
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .errors import ConfigError, InvalidInputError, NumericFailure
from .evaluation import PosteriorSample
from .features import feature_sweep
from .hyper import harmonic, sample_alpha, transition_hyper_sweep
from .messages import EmissionCache
from .model import (
    FeatureMatrix,
    Hyperparams,
    MniwPrior,
    ModeSequence,
    SamplerState,
    TransitionState,
    audit,
    prior_eta_shapes,
    sample_log_gamma,
)
from .params import all_sufficient_stats, auxiliary_sweep, sample_mniw_posterior

logger = logging.getLogger(__name__)

STREAMS = ("init", "features", "params", "hyper")


@dataclass
class RunConfig:
    iterations: int = 1000
    burn_in: int = 0
    thin: int = 1
    chains: int = 1
    seed: int = 0
    lag: int = 1
    init_blocks: int = 5
    checkpoint_every: int = 0  # 0: only at the end of a chain
    # hyperparameter priors (shape, rate) and proposal variances
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    a_gamma: float = 1.0
    b_gamma: float = 1.0
    a_kappa: float = 100.0
    b_kappa: float = 1.0
    sigma2_gamma: float = 1.0
    sigma2_kappa: float = 100.0
    # initial values; None draws from the prior
    alpha: Optional[float] = None
    gamma: Optional[float] = None
    kappa: Optional[float] = None
    # MNIW prior: M = 0, K = k_scale * I, n0 = d + n0_offset,
    # S0 = s0_factor * cov(first differences)
    k_scale: float = 0.1
    n0_offset: float = 2.0
    s0_factor: float = 0.75

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0", "iterations")
        if self.burn_in < 0 or self.burn_in > self.iterations:
            raise ConfigError("burn_in must lie between 0 and iterations", "burn_in")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1", "thin")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1", "chains")
        if self.lag < 1:
            raise ConfigError("lag must be >= 1", "lag")
        if self.init_blocks < 1:
            raise ConfigError("init_blocks must be >= 1", "init_blocks")
        for name in ("a_alpha", "b_alpha", "a_gamma", "b_gamma", "a_kappa", "b_kappa",
                     "sigma2_gamma", "sigma2_kappa", "k_scale", "s0_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", name)
        for name in ("alpha", "gamma", "kappa"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive", name)

    def hyperparams(self, alpha):
        return Hyperparams(alpha=alpha, a_alpha=self.a_alpha, b_alpha=self.b_alpha,
                           a_gamma=self.a_gamma, b_gamma=self.b_gamma,
                           a_kappa=self.a_kappa, b_kappa=self.b_kappa,
                           sigma2_gamma=self.sigma2_gamma, sigma2_kappa=self.sigma2_kappa)

    def prior_for(self, dataset):
        base = MniwPrior.default_for(dataset, k_scale=self.k_scale, scale_factor=self.s0_factor)
        return MniwPrior(dof=dataset.dim + self.n0_offset, scale=base.scale,
                         mean=base.mean, col_precision=base.col_precision)

    def digest(self):
        """Hash of everything that affects the sampled stream except run length."""
        d = asdict(self)
        for key in ("iterations", "checkpoint_every"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


class ChainStreams:
    """Independent Philox generators per sampler module for one chain."""

    def __init__(self, seed_seq):
        children = seed_seq.spawn(len(STREAMS))
        self.gens = {name: np.random.Generator(np.random.Philox(c)) for name, c in zip(STREAMS, children)}

    def __getattr__(self, name):
        try:
            return self.__dict__["gens"][name]
        except KeyError:
            raise AttributeError(name) from None

    def get_state(self):
        return {name: g.bit_generator.state for name, g in self.gens.items()}

    def set_state(self, st):
        for name, s in st.items():
            self.gens[name].bit_generator.state = s


def chain_seeds(seed, chains):
    return np.random.SeedSequence(seed).spawn(chains)


def block_labels(n, blocks):
    """Contiguous near-equal blocks ``0..blocks-1`` over ``n`` frames."""
    return np.concatenate([np.full(len(part), b) for b, part in enumerate(np.array_split(np.arange(n), blocks))])


def initialize(dataset, config, rng):
    """Initial state: each series cut into contiguous blocks, each block a fresh
    feature unique to that series; behaviors drawn from their conditional given
    that assignment, transition variables from the prior."""
    if dataset.lag != config.lag:
        raise ConfigError(f"dataset lag {dataset.lag} differs from configured lag {config.lag}", "lag")
    N = dataset.num_series
    h = config.hyperparams(1.0)
    alpha = config.alpha if config.alpha is not None else float(rng.gamma(h.a_alpha, 1.0 / h.b_alpha))
    gamma = config.gamma if config.gamma is not None else float(rng.gamma(h.a_gamma, 1.0 / h.b_gamma))
    kappa = config.kappa if config.kappa is not None else float(rng.gamma(h.a_kappa, 1.0 / h.b_kappa))
    h.alpha = alpha
    counts = []
    for i, s in enumerate(dataset.series):
        frames = s.length - dataset.lag
        b = min(config.init_blocks, frames)
        if b < config.init_blocks:
            logger.info("series %s: only %d frames, using %d initial blocks", s.id, frames, b)
        counts.append(b)
    K = int(sum(counts))
    flags = np.zeros((N, K), dtype=bool)
    modes = []
    offset = 0
    for i, b in enumerate(counts):
        flags[i, offset : offset + b] = True
        z = block_labels(dataset.series[i].length - dataset.lag, b) + offset
        modes.append(ModeSequence.from_states(z, K))
        offset += b
    prior = config.prior_for(dataset)
    suff = all_sufficient_stats(dataset, modes, K, prior)
    behaviors = [sample_mniw_posterior(st, prior, rng, behavior=k) for k, st in enumerate(suff)]
    log_eta = [sample_log_gamma(prior_eta_shapes(K, gamma, kappa), rng) for _ in range(N)]
    state = SamplerState(
        dataset=dataset,
        features=FeatureMatrix(flags),
        behaviors=behaviors,
        transitions=TransitionState(log_eta, gamma, kappa),
        hyper=h,
        prior=prior,
        modes=modes,
        iteration=0,
    )
    audit(state)
    return state


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


def sweep(state, streams, cache=None):
    """One full iteration.  Returns the emission cache for the new behaviors."""
    if cache is None:
        cache = EmissionCache(state.dataset, state.behaviors)
    feature_sweep(state, streams.features, cache)
    h = state.hyper
    h.alpha = sample_alpha(state.num_features, state.dataset.num_series, h.a_alpha, h.b_alpha, streams.hyper)
    cache = auxiliary_sweep(state, streams.params, cache)
    transition_hyper_sweep(state, streams.hyper)
    state.iteration += 1
    audit(state)
    return cache


def total_log_likelihood(state, cache):
    return float(sum(
        cache.loglik(i, state.features.active(i), state.transitions.log_eta[i])
        for i in range(state.dataset.num_series)
    ))


def log_ibp(F, alpha):
    N = F.num_series
    m = F.counts
    K = m.size
    out = K * log(alpha) - alpha * harmonic(N)
    out += float(sum(lgamma(N - mk + 1) + lgamma(mk) - lgamma(N + 1) for mk in m))
    return out


def log_mniw(behavior, prior):
    d = prior.dim
    Kinv = np.linalg.inv(prior.col_precision)
    lp = stats.invwishart.logpdf(behavior.Sigma if d > 1 else behavior.Sigma[0, 0], df=prior.dof,
                                 scale=prior.scale if d > 1 else prior.scale[0, 0])
    lp += stats.matrix_normal.logpdf(behavior.A, mean=prior.mean, rowcov=behavior.Sigma, colcov=Kinv)
    return float(lp)


def log_joint(state, loglik):
    """Log-likelihood plus every prior term (feature matrix, hyperparameters,
    behaviors, transition variables)."""
    h, tr = state.hyper, state.transitions
    lp = loglik + log_ibp(state.features, h.alpha)
    lp += stats.gamma.logpdf(h.alpha, h.a_alpha, scale=1.0 / h.b_alpha)
    lp += stats.gamma.logpdf(tr.gamma, h.a_gamma, scale=1.0 / h.b_gamma)
    lp += stats.gamma.logpdf(tr.kappa, h.a_kappa, scale=1.0 / h.b_kappa)
    lp += sum(log_mniw(b, state.prior) for b in state.behaviors)
    for le in tr.log_eta:
        shapes = prior_eta_shapes(le.shape[0], tr.gamma, tr.kappa)
        # density of eta expressed through log eta (no Jacobian: density is on eta)
        lp += float(np.sum((shapes - 1.0) * le - np.exp(le) - gammaln(shapes)))
    return float(lp)


def snapshot(state, loglik, chain=0, with_joint=True):
    return PosteriorSample(
        iteration=state.iteration,
        features=state.features,
        behaviors=list(state.behaviors),
        log_eta=[le.copy() for le in state.transitions.log_eta],
        alpha=state.hyper.alpha,
        gamma=state.transitions.gamma,
        kappa=state.transitions.kappa,
        modes=None if state.modes is None else [m.states.copy() for m in state.modes],
        log_likelihood=loglik,
        chain=chain,
        extra={"log_joint": log_joint(state, loglik)} if with_joint else {},
    )


def is_retained(iteration, config):
    if iteration == 0:
        return True
    return iteration > config.burn_in and (iteration - config.burn_in) % config.thin == 0


@dataclass
class Checkpoint:
    state: SamplerState
    rng_state: dict
    config_digest: str
    chain: int = 0


def run_chain(state, config, streams, chain=0, checkpoint_fn=None, emit_initial=True):
    """Advance ``state`` to ``config.iterations`` iterations, yielding retained samples.

    ``checkpoint_fn(Checkpoint)`` is called at the configured cadence, at the
    end, and with the last valid state if a numeric failure aborts the chain.
    """
    cache = EmissionCache(state.dataset, state.behaviors)
    if emit_initial and state.iteration == 0:
        yield snapshot(state, total_log_likelihood(state, cache), chain)
    digest = config.digest()
    while state.iteration < config.iterations:
        saved = (state.copy(), streams.get_state())
        try:
            cache = sweep(state, streams, cache)
            ll = total_log_likelihood(state, cache)
            if not np.isfinite(ll):
                raise NumericFailure(f"non-finite log-likelihood at iteration {state.iteration}")
        except NumericFailure:
            if checkpoint_fn is not None:
                checkpoint_fn(Checkpoint(saved[0], saved[1], digest, chain))
            raise
        if is_retained(state.iteration, config):
            yield snapshot(state, ll, chain)
        if checkpoint_fn is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            checkpoint_fn(Checkpoint(state.copy(), streams.get_state(), digest, chain))
    if checkpoint_fn is not None:
        checkpoint_fn(Checkpoint(state.copy(), streams.get_state(), digest, chain))


def start_chain(dataset, config, chain):
    """Fresh streams and initial state for chain ``chain`` of a run."""
    seq = chain_seeds(config.seed, config.chains)[chain]
    streams = ChainStreams(seq)
    state = initialize(dataset, config, streams.init)
    return state, streams


def resume_chain(ckpt, config):
    if ckpt.config_digest != config.digest():
        raise ConfigError("checkpoint was written with a different configuration", "resume")
    seq = chain_seeds(config.seed, config.chains)[ckpt.chain]
    streams = ChainStreams(seq)
    streams.set_state(ckpt.rng_state)
    return ckpt.state, streams


def run_single(dataset, config, chain=0):
    """Run one chain to completion and return its retained samples."""
    state, streams = start_chain(dataset, config, chain)
    return list(run_chain(state, config, streams, chain))


def _run_single_star(args):
    return run_single(*args)


def run_chains(dataset, config, jobs=1):
    """All chains of ``config``; processes are used when ``jobs > 1``."""
    work = [(dataset, config, c) for c in range(config.chains)]
    if jobs <= 1 or config.chains == 1:
        return [run_single(*w) for w in work]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_single_star, work))
