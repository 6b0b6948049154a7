"""Label-invariant scoring of segmentations and posterior samples."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError
from .messages import emission_table, forward_from_emissions
from .model import FeatureMatrix, log_pi_restricted


@dataclass
class PosteriorSample:
    """Everything needed to score one retained MCMC sample."""

    iteration: int
    features: FeatureMatrix
    behaviors: list
    log_eta: list
    alpha: float = float("nan")
    gamma: float = float("nan")
    kappa: float = float("nan")
    modes: Optional[list] = None  # per-series label arrays (t = r+1..T)
    log_likelihood: float = float("nan")
    chain: int = 0
    extra: dict = field(default_factory=dict)


def _concat(labels):
    if isinstance(labels, np.ndarray) and labels.ndim == 1:
        return labels
    if len(labels) == 0:
        return np.empty(0, dtype=np.int64)
    if isinstance(labels, (list, tuple)) and labels and np.ndim(labels[0]) == 0:
        return np.asarray(labels)
    return np.concatenate([np.asarray(x).ravel() for x in labels])


def hamming_matched(estimated, truth):
    """Fraction of mismatched frames after the best one-to-one relabeling.

    Either argument may be a single label sequence or a list of per-series
    sequences (concatenated, so longer series weigh more).  Returns
    ``(distance, mapping)`` with ``mapping`` sending estimated labels to the
    true labels they were matched with.
    """
    est = _concat(estimated)
    tru = _concat(truth)
    if est.size == 0 or tru.size == 0:
        raise InvalidInputError("cannot compare empty label sequences")
    if est.shape != tru.shape:
        raise InvalidInputError(f"label sequences differ in length: {est.size} vs {tru.size}")
    e_labels, e_idx = np.unique(est, return_inverse=True)
    t_labels, t_idx = np.unique(tru, return_inverse=True)
    n = max(e_labels.size, t_labels.size)
    overlap = np.zeros((n, n), dtype=np.int64)
    np.add.at(overlap, (e_idx, t_idx), 1)
    rows, cols = linear_sum_assignment(-overlap)
    matched = int(overlap[rows, cols].sum())
    mapping = {
        e_labels[r].item(): t_labels[c].item()
        for r, c in zip(rows, cols)
        if r < e_labels.size and c < t_labels.size
    }
    return 1.0 - matched / est.size, mapping


def expected_hamming(candidates, references):
    """``H[n] = mean_m hamming(candidates[n], references[m])``."""
    if not candidates or not references:
        raise InvalidInputError("need at least one candidate and one reference sample")
    return np.array([
        np.mean([hamming_matched(c, r)[0] for r in references]) for c in candidates
    ])


def select_min_expected_hamming(candidates, references):
    """Index of the candidate segmentation with least mean matched-Hamming
    distance to the references, plus every candidate's score."""
    scores = expected_hamming(candidates, references)
    return int(np.argmin(scores)), scores


def series_loglik(sample, i, targets, regressors):
    active = sample.features.active(i)
    table = emission_table(targets, regressors, sample.behaviors, active)
    pi = np.exp(log_pi_restricted(sample.log_eta[i], active))
    return forward_from_emissions(table, pi)


def heldout_predictive_loglik(samples, dataset):
    """Total log-likelihood of ``dataset`` under each sample.

    Held-out series ``i`` reuses the sample's feature row and transition
    variables of training series ``i``.
    """
    out = np.empty(len(samples))
    for s_idx, sample in enumerate(samples):
        if sample.features.num_series != dataset.num_series:
            raise InvalidInputError(
                f"sample has {sample.features.num_series} series, dataset has {dataset.num_series}"
            )
        if sample.behaviors and sample.behaviors[0].A.shape != (dataset.dim, dataset.dim * dataset.lag):
            raise InvalidInputError("behavior dimensions do not match the dataset")
        total = 0.0
        for i in range(dataset.num_series):
            targets, regressors = dataset.lagged(i)
            total += series_loglik(sample, i, targets, regressors)
        out[s_idx] = total
    return out


def usage_matrix(modes, num_columns, threshold=0.02):
    """Binary ``N x num_columns`` matrix: label used on more than ``threshold``
    of a series' frames."""
    out = np.zeros((len(modes), num_columns))
    for i, z in enumerate(modes):
        z = np.asarray(z)
        labels, counts = np.unique(z, return_counts=True)
        for lab, c in zip(labels, counts):
            if c / z.size > threshold:
                out[i, lab] = 1.0
    return out


def summarize_feature_matrix(samples, truth, threshold=0.02, num_true=None):
    """Average usage matrix after mapping each sample's labels onto the truth.

    ``samples`` is a list of per-series label lists; ``truth`` the true
    per-series labels.  Estimated labels left unmatched go to extra columns
    after the ``num_true`` true ones, in increasing label order.
    """
    num_true = int(num_true if num_true is not None else _concat(truth).max() + 1)
    mats = []
    for modes in samples:
        _, mapping = hamming_matched(modes, truth)
        labels = np.unique(_concat(modes))
        target = np.empty(labels.size, dtype=np.int64)
        n_extra = 0
        for j, lab in enumerate(labels.tolist()):
            if lab in mapping:
                target[j] = mapping[lab]
            else:
                target[j] = num_true + n_extra
                n_extra += 1
        mapped = [target[np.searchsorted(labels, np.asarray(z))] for z in modes]
        mats.append(usage_matrix(mapped, num_true + n_extra, threshold))
    width = max(m.shape[1] for m in mats)
    acc = np.zeros((mats[0].shape[0], width))
    for m in mats:
        acc[:, : m.shape[1]] += m
    return acc / len(mats)
