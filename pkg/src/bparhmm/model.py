"""Domain types shared by every sampler module.

Feature columns are identified by their position ``k`` in the feature matrix.
The behavior list and every series' transition-variable matrix are kept
index-aligned with those columns; :func:`audit` checks the alignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, InvalidStateError, NumericFailure

JITTER_ATTEMPTS = 3


def safe_cholesky(mat, what="matrix", behavior=None):
    """Lower Cholesky factor, retrying with a small diagonal jitter.

    The jitter is ``1e-10 * trace / d`` and is added at most
    ``JITTER_ATTEMPTS`` times before giving up.
    """
    mat = np.asarray(mat, dtype=float)
    d = mat.shape[0]
    if not np.all(np.isfinite(mat)):
        raise NumericFailure(f"non-finite entries in {what}", behavior=behavior)
    jitter = 1e-10 * abs(np.trace(mat)) / d
    work = mat
    for attempt in range(JITTER_ATTEMPTS + 1):
        try:
            return linalg.cholesky(work, lower=True, check_finite=False)
        except linalg.LinAlgError:
            if attempt == JITTER_ATTEMPTS or jitter == 0.0:
                break
            work = work + jitter * np.eye(d)
    suffix = f" (behavior {behavior})" if behavior is not None else ""
    raise NumericFailure(f"{what} is not positive definite{suffix}", behavior=behavior)


def sample_log_gamma(shape, rng):
    """Draw ``log G`` for ``G ~ Gamma(shape, 1)`` without underflow.

    Small shapes use ``G = G' * U**(1/shape)`` with ``G' ~ Gamma(shape + 1)``.
    Always consumes one gamma and one uniform draw per entry.
    """
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape))
    u = rng.random(shape.shape)
    with np.errstate(divide="ignore"):
        boost = np.where(small, np.log(u) / np.where(small, shape, 1.0), 0.0)
    return np.log(g) + boost


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeries:
    id: str
    observations: np.ndarray

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2:
            raise InvalidInputError(f"series {self.id!r}: observations must be T x d")
        if not np.all(np.isfinite(obs)):
            raise InvalidInputError(f"series {self.id!r}: non-finite observation")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def length(self):
        return self.observations.shape[0]

    @property
    def dim(self):
        return self.observations.shape[1]


def build_lagged(series, r):
    """Stack the ``r`` most recent observations (most recent first).

    Returns an array of shape ``(T - r, d * r)`` whose row ``t - r - 1``
    (for 1-based ``t = r+1..T``) is ``[y_{t-1}, ..., y_{t-r}]``.
    """
    y = series.observations if isinstance(series, TimeSeries) else np.atleast_2d(np.asarray(series, float).T).T
    T = y.shape[0]
    if r < 1:
        raise InvalidInputError("lag order must be >= 1")
    if T <= r:
        raise InvalidInputError(f"series of length {T} is too short for lag order {r}")
    return np.hstack([y[r - j : T - j] for j in range(1, r + 1)])


@dataclass
class Dataset:
    series: list
    lag: int = 1

    def __post_init__(self):
        if not self.series:
            raise InvalidInputError("dataset has no series")
        if self.lag < 1:
            raise InvalidInputError("lag order must be >= 1")
        d = self.series[0].dim
        for s in self.series:
            if s.dim != d:
                raise InvalidInputError(f"series {s.id!r} has dimension {s.dim}, expected {d}")
            if s.length <= self.lag:
                raise InvalidInputError(
                    f"series {s.id!r} has length {s.length}; need more than lag order {self.lag}"
                )
        self._lagged = [None] * len(self.series)

    @property
    def dim(self):
        return self.series[0].dim

    @property
    def num_series(self):
        return len(self.series)

    def __len__(self):
        return len(self.series)

    def lagged(self, i):
        """``(targets, regressors)`` for series ``i``: shapes ``(T-r, d)`` and ``(T-r, d*r)``."""
        cached = self._lagged[i]
        if cached is None:
            s = self.series[i]
            cached = (s.observations[self.lag :], build_lagged(s, self.lag))
            self._lagged[i] = cached
        return cached

    def ids(self):
        return [s.id for s in self.series]

    def __getstate__(self):
        return {"series": self.series, "lag": self.lag}

    def __setstate__(self, st):
        self.series = st["series"]
        self.lag = st["lag"]
        self._lagged = [None] * len(self.series)


# ---------------------------------------------------------------------------
# behaviors and their prior
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VarBehavior:
    """One VAR(r) behavior: ``y_t = A @ ytilde_t + e``, ``e ~ N(0, Sigma)``."""

    A: np.ndarray
    Sigma: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.A, dtype=float))
        S = np.atleast_2d(np.array(self.Sigma, dtype=float))
        d = S.shape[0]
        if S.shape != (d, d) or A.shape[0] != d or A.shape[1] % d:
            raise InvalidInputError(f"inconsistent behavior shapes A{A.shape} Sigma{S.shape}")
        S = 0.5 * (S + S.T)
        try:
            L = linalg.cholesky(S, lower=True)
        except linalg.LinAlgError:
            raise NumericFailure("noise covariance is not positive definite") from None
        for arr in (A, S, L):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "chol", L)

    @property
    def dim(self):
        return self.Sigma.shape[0]

    @property
    def lag(self):
        return self.A.shape[1] // self.dim

    def log_density(self, targets, regressors):
        """Row-wise Gaussian log-density of ``targets`` given ``regressors``."""
        resid = targets - regressors @ self.A.T
        d = self.dim
        if d == 1:
            sd = self.chol[0, 0]
            quad = (resid[:, 0] / sd) ** 2
            logdet = 2.0 * np.log(sd)
        else:
            white = linalg.solve_triangular(self.chol, resid.T, lower=True, check_finite=False)
            quad = np.einsum("ij,ij->j", white, white)
            logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)


@dataclass(frozen=True, eq=False)
class MniwPrior:
    """Matrix-normal inverse-Wishart prior on ``(A, Sigma)``.

    ``Sigma ~ IW(dof, scale)`` and ``A | Sigma ~ MN(mean, Sigma, col_precision)``
    where the column covariance of ``A`` is ``inv(col_precision)``.
    """

    dof: float
    scale: np.ndarray
    mean: np.ndarray
    col_precision: np.ndarray

    def __post_init__(self):
        S0 = np.atleast_2d(np.array(self.scale, dtype=float))
        M = np.atleast_2d(np.array(self.mean, dtype=float))
        K = np.atleast_2d(np.array(self.col_precision, dtype=float))
        d = S0.shape[0]
        if M.shape[0] != d or K.shape != (M.shape[1], M.shape[1]):
            raise InvalidInputError("MNIW prior shapes are inconsistent")
        if not self.dof > d - 1:
            raise InvalidInputError(f"IW degrees of freedom must exceed d - 1 = {d - 1}")
        safe_cholesky(S0, "prior scale S0")
        safe_cholesky(K, "prior column precision K")
        object.__setattr__(self, "scale", S0)
        object.__setattr__(self, "mean", M)
        object.__setattr__(self, "col_precision", K)
        object.__setattr__(self, "dof", float(self.dof))

    @property
    def dim(self):
        return self.scale.shape[0]

    @property
    def lag(self):
        return self.mean.shape[1] // self.dim

    @classmethod
    def default_for(cls, dataset, k_scale=0.1, scale_factor=0.75):
        """Defaults: ``M = 0``, ``K = 0.1 I``, ``n0 = d + 2`` and ``S0`` equal to
        0.75 times the covariance of the pooled first differences."""
        d, r = dataset.dim, dataset.lag
        diffs = np.vstack([np.diff(s.observations, axis=0) for s in dataset.series])
        cov = np.atleast_2d(np.cov(diffs, rowvar=False))
        if not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov).min() <= 0:
            cov = np.eye(d) * max(float(np.var(diffs)), 1e-6)
        return cls(
            dof=d + 2,
            scale=scale_factor * cov,
            mean=np.zeros((d, d * r)),
            col_precision=k_scale * np.eye(d * r),
        )


# ---------------------------------------------------------------------------
# features, transitions, modes
# ---------------------------------------------------------------------------


class FeatureMatrix:
    """Binary ``N x K`` matrix of behavior assignments (read-only)."""

    __slots__ = ("flags",)

    def __init__(self, flags):
        arr = np.array(flags, dtype=bool)
        if arr.ndim != 2:
            raise InvalidStateError("feature matrix must be two-dimensional")
        arr.setflags(write=False)
        self.flags = arr

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((n, 0), dtype=bool))

    @property
    def num_series(self):
        return self.flags.shape[0]

    @property
    def num_features(self):
        return self.flags.shape[1]

    @property
    def counts(self):
        return self.flags.sum(axis=0).astype(int)

    def active(self, i):
        return np.flatnonzero(self.flags[i])

    def row(self, i):
        return self.flags[i]

    def with_flag(self, i, k, value):
        out = self.flags.copy()
        out[i, k] = bool(value)
        return FeatureMatrix(out)

    def with_row(self, i, row):
        out = self.flags.copy()
        out[i] = np.asarray(row, dtype=bool)
        return FeatureMatrix(out)

    def with_new_column(self, owners):
        col = np.zeros((self.num_series, 1), dtype=bool)
        col[list(np.atleast_1d(owners)), 0] = True
        return FeatureMatrix(np.hstack([self.flags, col]))

    def without_columns(self, cols):
        keep = np.setdiff1d(np.arange(self.num_features), np.atleast_1d(cols))
        return FeatureMatrix(self.flags[:, keep])

    def check(self):
        if self.flags.shape[1] and np.any(self.counts == 0):
            raise InvalidStateError("feature matrix has an unused column")
        if np.any(~self.flags.any(axis=1)):
            raise InvalidStateError("feature matrix has a series with no active feature")

    def __eq__(self, other):
        return isinstance(other, FeatureMatrix) and np.array_equal(self.flags, other.flags)

    def __repr__(self):
        return f"FeatureMatrix({self.flags.astype(int).tolist()})"


def construct_pi(eta_row, f_row):
    """Feature-constrained transition row: ``eta`` restricted to active features
    and renormalized; exactly zero elsewhere."""
    eta_row = np.asarray(eta_row, dtype=float)
    mask = np.asarray(f_row, dtype=bool)
    if not mask.any():
        raise InvalidStateError("feature row has no active entry")
    if np.any(eta_row[mask] <= 0):
        raise InvalidStateError("transition variables must be positive")
    out = np.where(mask, eta_row, 0.0)
    return out / out.sum()


def log_pi_restricted(log_eta, active):
    """Row-normalized log transition matrix over the active features only
    (shape ``K_i x K_i``)."""
    sub = log_eta[np.ix_(active, active)]
    top = sub.max(axis=1, keepdims=True)
    return sub - (top + np.log(np.exp(sub - top).sum(axis=1, keepdims=True)))


def transition_matrix(log_eta, f_row):
    """Full ``K x K`` matrix of feature-constrained transition rows.

    Rows and columns of inactive features are zero.
    """
    K = log_eta.shape[0]
    active = np.flatnonzero(np.asarray(f_row, dtype=bool))
    if active.size == 0:
        raise InvalidStateError("feature row has no active entry")
    pi = np.zeros((K, K))
    pi[np.ix_(active, active)] = np.exp(log_pi_restricted(log_eta, active))
    return pi


@dataclass
class TransitionState:
    """Per-series transition variables, stored as ``log eta`` (``K x K`` each),
    with the Dirichlet hyperparameters ``gamma`` and ``kappa``."""

    log_eta: list
    gamma: float
    kappa: float

    @property
    def eta(self):
        return [np.exp(m) for m in self.log_eta]

    def copy(self):
        return TransitionState([m.copy() for m in self.log_eta], self.gamma, self.kappa)


def prior_eta_shapes(K, gamma, kappa):
    return gamma + kappa * np.eye(K)


@dataclass
class ModeSequence:
    """Latent mode path over ``t = r+1..T`` (global feature indices)."""

    states: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_states(cls, states, K):
        states = np.asarray(states, dtype=np.int64)
        counts = np.zeros((K, K), dtype=np.int64)
        if states.size > 1:
            np.add.at(counts, (states[:-1], states[1:]), 1)
        return cls(states, counts)


@dataclass
class Hyperparams:
    """The beta-process mass ``alpha``, gamma priors (shape, rate) on alpha,
    gamma and kappa, and the proposal variances of the gamma/kappa moves.

    The current gamma and kappa live on :class:`TransitionState`.
    """

    alpha: float = 1.0
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    a_gamma: float = 1.0
    b_gamma: float = 1.0
    a_kappa: float = 100.0
    b_kappa: float = 1.0
    sigma2_gamma: float = 1.0
    sigma2_kappa: float = 100.0

    def __post_init__(self):
        for name in ("alpha", "a_alpha", "b_alpha", "a_gamma", "b_gamma",
                     "a_kappa", "b_kappa", "sigma2_gamma", "sigma2_kappa"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"hyperparameter {name} must be positive")


@dataclass
class SamplerState:
    dataset: Dataset
    features: FeatureMatrix
    behaviors: list
    transitions: TransitionState
    hyper: Hyperparams
    prior: MniwPrior
    modes: Optional[list] = None
    iteration: int = 0

    @property
    def num_features(self):
        return self.features.num_features

    def pi(self, i):
        return transition_matrix(self.transitions.log_eta[i], self.features.row(i))

    def copy(self):
        return SamplerState(
            dataset=self.dataset,
            features=self.features,
            behaviors=list(self.behaviors),
            transitions=self.transitions.copy(),
            hyper=Hyperparams(**vars(self.hyper)),
            prior=self.prior,
            modes=None if self.modes is None else [ModeSequence(m.states.copy(), m.counts.copy()) for m in self.modes],
            iteration=self.iteration,
        )


def audit(state: SamplerState):
    """Raise :class:`InvalidStateError` unless the state is structurally consistent."""
    F = state.features
    K = F.num_features
    N = state.dataset.num_series
    if F.num_series != N:
        raise InvalidStateError(f"feature matrix has {F.num_series} rows for {N} series")
    F.check()
    if len(state.behaviors) != K:
        raise InvalidStateError(f"{len(state.behaviors)} behaviors for {K} feature columns")
    d, r = state.dataset.dim, state.dataset.lag
    for k, b in enumerate(state.behaviors):
        if b.A.shape != (d, d * r):
            raise InvalidStateError(f"behavior {k} has A of shape {b.A.shape}")
    if len(state.transitions.log_eta) != N:
        raise InvalidStateError("transition state does not have one matrix per series")
    for i, le in enumerate(state.transitions.log_eta):
        if le.shape != (K, K):
            raise InvalidStateError(f"series {i} transition variables have shape {le.shape}, expected {(K, K)}")
        if not np.all(np.isfinite(le)):
            raise InvalidStateError(f"series {i} has non-positive or non-finite transition variables")
    if state.modes is not None:
        for i, m in enumerate(state.modes):
            if m.states.size and not np.all(F.flags[i, m.states]):
                raise InvalidStateError(f"series {i} mode sequence visits an inactive feature")
    return True


def mode_path_log_prob(z, log_pi0, log_pi):
    """Log prior probability of a path under initial/transition log-probabilities."""
    z = np.asarray(z)
    return float(log_pi0[z[0]] + np.sum(log_pi[z[:-1], z[1:]]))
