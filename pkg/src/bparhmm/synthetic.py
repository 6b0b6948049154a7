"""Synthetic switching-VAR data: feature-matrix draws, ground-truth models,
simulation, and the presets used by the experiments.

Preset lengths, noise draws and transition matrices are our own choices
where the source experiments leave them open; they are documented on each
preset function.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .model import Dataset, FeatureMatrix, ModeSequence, TimeSeries, VarBehavior
from .params import sample_inverse_wishart

LIBRARY_COEFFICIENTS = (-0.8, -0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8)
UNIQUE_MODE_COEFFICIENTS = (-0.8, -0.4, 0.8, -0.3)
UNIQUE_MODE_FEATURES = ((1, 1, 1, 0), (1, 1, 1, 0), (0, 0, 1, 1))
UNIQUE_MODE_LENGTHS = (2000, 2000, 500)
HELDOUT_LENGTH = 1000
HELDOUT_DATASETS = 100

MAX_REDRAWS = 10_000


def draw_truncated_ibp(N, alpha, K_max, rng):
    """Sequential Indian buffet draw with at most ``K_max`` columns.

    Customer ``i`` (1-based) takes an existing dish with probability
    ``m_k / i`` and ``Poisson(alpha / i)`` new dishes.  Matrices with an empty
    row are discarded and redrawn whole.
    """
    for _ in range(MAX_REDRAWS):
        cols = []  # list of per-dish owner lists
        for i in range(1, N + 1):
            for owners in cols:
                if rng.random() < len(owners) / i:
                    owners.append(i - 1)
            for _ in range(rng.poisson(alpha / i)):
                cols.append([i - 1])
            if len(cols) > K_max:
                raise InvalidInputError(
                    f"IBP draw needs more than K_max={K_max} columns; increase K_max"
                )
        flags = np.zeros((N, len(cols)), dtype=bool)
        for k, owners in enumerate(cols):
            flags[owners, k] = True
        if flags.any(axis=1).all():
            return FeatureMatrix(flags)
    raise InvalidInputError("could not draw a feature matrix without empty rows")


def draw_finite_feature_matrix(N, alpha, K, rng):
    """``K``-column beta-Bernoulli draw: ``w_k ~ Beta(alpha/K, 1)``,
    ``f_ik ~ Bernoulli(w_k)``; redrawn until every row and column is used."""
    for _ in range(MAX_REDRAWS):
        w = rng.beta(alpha / K, 1.0, size=K)
        flags = rng.random((N, K)) < w
        if flags.any(axis=1).all() and flags.any(axis=0).all():
            return FeatureMatrix(flags)
    raise InvalidInputError("could not draw a feature matrix with all rows and columns used")


def sticky_kappa(K, gamma=1.0, self_prob=0.9):
    """kappa giving expected self-transition ``self_prob`` under Dir(gamma + kappa e_j)."""
    if K <= 1:
        return 0.0
    return max(gamma * (self_prob * K - 1.0) / (1.0 - self_prob), 0.0)


def sticky_transitions(F, rng, gamma=1.0, self_prob=0.9, shared=False, expected=False):
    """One ``K x K`` matrix per series with sticky Dirichlet rows over its active features.

    ``shared=True`` builds a single sticky matrix over all ``K`` features and
    gives each series its restriction to the active features, renormalized.
    ``expected=True`` (shared only) uses the Dirichlet mean instead of a draw:
    ``self_prob`` on the diagonal, the rest spread evenly.
    """
    K = F.num_features
    if expected and not shared:
        raise InvalidInputError("expected transitions are only defined for a shared matrix")
    if shared:
        kappa = sticky_kappa(K, gamma, self_prob)
        if expected:
            full = np.full((K, K), (1.0 - self_prob) / max(K - 1, 1))
            np.fill_diagonal(full, self_prob if K > 1 else 1.0)
        else:
            full = np.array([rng.dirichlet(np.full(K, gamma) + kappa * np.eye(K)[j]) for j in range(K)])
    out = []
    for i in range(F.num_series):
        active = F.active(i)
        Ki = active.size
        P = np.zeros((K, K))
        if shared:
            sub = full[np.ix_(active, active)]
            P[np.ix_(active, active)] = sub / sub.sum(axis=1, keepdims=True)
        else:
            kappa = sticky_kappa(Ki, gamma, self_prob)
            for a, j in enumerate(active):
                conc = np.full(Ki, gamma)
                conc[a] += kappa
                P[j, active] = rng.dirichlet(conc)
        out.append(P)
    return out


@dataclass
class SwitchingArModel:
    """Ground truth: feature rows, behaviors, and per-series transition matrices."""

    features: FeatureMatrix
    behaviors: list
    transitions: list
    lag: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.behaviors[0].dim


def ar1_behaviors(coefficients, noise_variances):
    return [VarBehavior([[a]], [[v]]) for a, v in zip(coefficients, noise_variances)]


def simulate_series(active, pi, behaviors, T, lag, rng, presample="zeros"):
    """Simulate one series of length ``T`` and its modes for ``t = r+1..T``.

    ``presample="zeros"`` runs the switching dynamics from ``t = 1`` with zero
    pre-sample values; ``"normal"`` draws the first ``r`` frames i.i.d.
    standard normal (independent of every parameter) and starts the mode
    chain at ``t = r + 1``.
    """
    d = behaviors[active[0]].dim
    y = np.zeros((T + lag, d))  # lag rows of pre-sample padding
    z = np.zeros(T, dtype=np.int64)
    start = 0
    if presample == "normal":
        y[lag : 2 * lag] = rng.standard_normal((lag, d))
        start = lag
    elif presample != "zeros":
        raise InvalidInputError(f"unknown presample mode {presample!r}")
    z_prev = -1
    for t in range(start, T):
        if z_prev < 0:
            k = int(active[rng.integers(active.size)])
        else:
            k = int(rng.choice(pi.shape[1], p=pi[z_prev]))
        b = behaviors[k]
        ytilde = y[t : t + lag][::-1].reshape(-1)
        y[t + lag] = b.A @ ytilde + b.chol @ rng.standard_normal(d)
        z[t] = k
        z_prev = k
    return y[lag:], z[lag:]


def generate_switching_ar(model, lengths, rng, ids=None, presample="zeros"):
    """Simulate every series of ``model``.  Returns ``(Dataset, [ModeSequence])``."""
    F = model.features
    if len(lengths) != F.num_series:
        raise InvalidInputError("need one length per series")
    ids = ids or [f"series{i + 1}" for i in range(F.num_series)]
    series, truth = [], []
    K = F.num_features
    for i, T in enumerate(lengths):
        if T <= model.lag:
            raise InvalidInputError(f"series length {T} must exceed lag {model.lag}")
        y, z = simulate_series(F.active(i), model.transitions[i], model.behaviors, T, model.lag, rng, presample)
        series.append(TimeSeries(ids[i], y))
        truth.append(ModeSequence.from_states(z, K))
    return Dataset(series, model.lag), truth


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _iw_noise(k, rng, dof=3.0, scale=0.5):
    return [float(sample_inverse_wishart(dof, np.array([[scale]]), rng)[0, 0]) for _ in range(k)]


def library_model(rng, length=1000, alpha=10.0):
    """Five AR(1) series over nine coefficients -0.8..0.8 (feature ``k`` uses
    the ``k``-th coefficient).  Features: 9-column beta-Bernoulli draw with
    ``alpha = 10``; noise variances from ``IW(3, 0.5)``; sticky transitions
    with expected self-transition 0.9; every series has ``length`` frames."""
    F = draw_finite_feature_matrix(5, alpha, len(LIBRARY_COEFFICIENTS), rng)
    behaviors = ar1_behaviors(LIBRARY_COEFFICIENTS, _iw_noise(len(LIBRARY_COEFFICIENTS), rng))
    model = SwitchingArModel(F, behaviors, sticky_transitions(F, rng), lag=1,
                             meta={"preset": "paper-6.1", "coefficients": list(LIBRARY_COEFFICIENTS)})
    return model, [length] * 5


def unique_mode_model(rng):
    """Three AR(1) series: series 1-2 use {-0.8, -0.4, 0.8}, series 3 uses
    {-0.3, 0.8}; lengths 2000/2000/500.  Noise variances from ``IW(3, 0.5)``.
    All series share one transition matrix, the sticky-Dirichlet mean
    (self-transition 0.9, the rest spread evenly), each restricted to its own
    features."""
    F = FeatureMatrix(np.array(UNIQUE_MODE_FEATURES, dtype=bool))
    behaviors = ar1_behaviors(UNIQUE_MODE_COEFFICIENTS, _iw_noise(len(UNIQUE_MODE_COEFFICIENTS), rng))
    model = SwitchingArModel(F, behaviors, sticky_transitions(F, rng, shared=True, expected=True), lag=1,
                             meta={"preset": "paper-6.2", "coefficients": list(UNIQUE_MODE_COEFFICIENTS)})
    return model, list(UNIQUE_MODE_LENGTHS)


PRESETS = ("paper-6.1", "paper-6.2", "paper-6.2-heldout")


def preset(name, seed=0, count=HELDOUT_DATASETS):
    """Build a preset.  Returns ``(model, [(Dataset, truth), ...])``.

    The ground-truth model depends only on ``seed``; ``paper-6.2-heldout``
    shares its model with ``paper-6.2`` and yields ``count`` (at most 100)
    datasets of length-1000 series, each simulated from its own child seed.
    """
    ss = np.random.SeedSequence(seed)
    model_seed, data_seed = ss.spawn(2)
    model_rng = np.random.default_rng(model_seed)
    if name == "paper-6.1":
        model, lengths = library_model(model_rng)
        return model, [generate_switching_ar(model, lengths, np.random.default_rng(data_seed))]
    if name == "paper-6.2":
        model, lengths = unique_mode_model(model_rng)
        return model, [generate_switching_ar(model, lengths, np.random.default_rng(data_seed))]
    if name == "paper-6.2-heldout":
        model, _ = unique_mode_model(model_rng)
        _, heldout_seed = data_seed.spawn(2)
        out = []
        if not 1 <= count <= HELDOUT_DATASETS:
            raise InvalidInputError(f"held-out count must lie in 1..{HELDOUT_DATASETS}")
        for child in heldout_seed.spawn(HELDOUT_DATASETS)[:count]:
            out.append(generate_switching_ar(model, [HELDOUT_LENGTH] * 3, np.random.default_rng(child)))
        return model, out
    raise InvalidInputError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def heldout_datasets(seed=0, count=HELDOUT_DATASETS):
    """First ``count`` held-out datasets of the ``paper-6.2`` model for ``seed``."""
    return preset("paper-6.2-heldout", seed, count)
