"""Readers and writers for every file the command line produces.

* dataset CSV: ``series_id,t,y1,...,yd`` (long form, ``t`` strictly increasing per series)
* labels CSV: ``series_id,t,label``
* feature-matrix CSV: ``series_id,feature_1,...,feature_K``
* sample logs: JSON lines, one record per retained sample
* checkpoints: tagged, versioned pickles
* run configuration: INI file with fixed sections

Floats are written with ``repr`` so every file reads back bit-exact.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import pickle
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError
from .evaluation import PosteriorSample
from .model import Dataset, FeatureMatrix, TimeSeries, VarBehavior

CHECKPOINT_TAG = b"BPARHMM-CHECKPOINT"
CHECKPOINT_VERSION = 1


def _num(x):
    return repr(float(x))


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _read_rows(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise InvalidInputError(f"{path}: not UTF-8 text") from e
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InvalidInputError(f"{path}: empty file")
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def write_dataset(dataset, path):
    d = dataset.dim
    rows = []
    for s in dataset.series:
        for t, y in enumerate(s.observations, start=1):
            rows.append([s.id, t, *(_num(v) for v in y)])
    _write_rows(path, ["series_id", "t"] + [f"y{j + 1}" for j in range(d)], rows)


def read_dataset(path, lag=1):
    header, rows = _read_rows(path)
    if len(header) < 3 or header[:2] != ["series_id", "t"]:
        raise InvalidInputError(f"{path}: header must be series_id,t,y1,...,yd")
    d = len(header) - 2
    if header[2:] != [f"y{j + 1}" for j in range(d)]:
        raise InvalidInputError(f"{path}: value columns must be named y1..y{d}")
    order, values, times = [], {}, {}
    for n, row in enumerate(rows, start=2):
        if len(row) != d + 2:
            raise InvalidInputError(f"{path}:{n}: expected {d + 2} fields, got {len(row)}")
        sid = row[0]
        try:
            t = int(row[1])
            y = [float(v) for v in row[2:]]
        except ValueError as e:
            raise InvalidInputError(f"{path}:{n}: {e}") from None
        if not np.all(np.isfinite(y)):
            raise InvalidInputError(f"{path}:{n}: missing or non-finite value")
        if sid not in values:
            order.append(sid)
            values[sid], times[sid] = [], []
        elif t <= times[sid][-1]:
            raise InvalidInputError(f"{path}:{n}: t must increase within series {sid!r}")
        values[sid].append(y)
        times[sid].append(t)
    return Dataset([TimeSeries(sid, np.array(values[sid])) for sid in order], lag)


# ---------------------------------------------------------------------------
# labels and feature matrices
# ---------------------------------------------------------------------------


def write_labels(ids, modes, path, lag=1):
    """Mode labels; ``modes[i]`` covers ``t = lag+1 .. T_i``."""
    rows = []
    for sid, z in zip(ids, modes):
        z = getattr(z, "states", z)
        for t, lab in enumerate(np.asarray(z), start=lag + 1):
            rows.append([sid, t, int(lab)])
    _write_rows(path, ["series_id", "t", "label"], rows)


def read_labels(path):
    """Returns ``(ids, times, labels)`` with one integer array per series."""
    header, rows = _read_rows(path)
    if header != ["series_id", "t", "label"]:
        raise InvalidInputError(f"{path}: header must be series_id,t,label")
    order, times, labels = [], {}, {}
    for n, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise InvalidInputError(f"{path}:{n}: expected 3 fields")
        sid = row[0]
        try:
            t, lab = int(row[1]), int(row[2])
        except ValueError as e:
            raise InvalidInputError(f"{path}:{n}: {e}") from None
        if sid not in labels:
            order.append(sid)
            times[sid], labels[sid] = [], []
        times[sid].append(t)
        labels[sid].append(lab)
    return order, [np.array(times[s]) for s in order], [np.array(labels[s], dtype=np.int64) for s in order]


def write_feature_matrix(ids, F, path):
    flags = F.flags if isinstance(F, FeatureMatrix) else np.asarray(F)
    rows = [[sid, *(int(v) for v in row)] for sid, row in zip(ids, flags)]
    _write_rows(path, ["series_id"] + [f"feature_{k + 1}" for k in range(flags.shape[1])], rows)


def write_matrix_csv(ids, mat, path, prefix="feature_"):
    rows = [[sid, *(_num(v) for v in row)] for sid, row in zip(ids, np.asarray(mat))]
    _write_rows(path, ["series_id"] + [f"{prefix}{k + 1}" for k in range(np.shape(mat)[1])], rows)


def read_feature_matrix(path):
    header, rows = _read_rows(path)
    if not header or header[0] != "series_id":
        raise InvalidInputError(f"{path}: header must start with series_id")
    ids = [r[0] for r in rows]
    try:
        flags = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64).reshape(len(rows), len(header) - 1)
    except ValueError as e:
        raise InvalidInputError(f"{path}: {e}") from None
    if not np.isin(flags, (0, 1)).all():
        raise InvalidInputError(f"{path}: feature entries must be 0 or 1")
    return ids, FeatureMatrix(flags.astype(bool))


# ---------------------------------------------------------------------------
# sample logs
# ---------------------------------------------------------------------------


def run_length_encode(z):
    z = np.asarray(z)
    if z.size == 0:
        return []
    cut = np.flatnonzero(np.diff(z)) + 1
    starts = np.concatenate([[0], cut])
    lengths = np.diff(np.concatenate([starts, [z.size]]))
    return [[int(z[s]), int(n)] for s, n in zip(starts, lengths)]


def run_length_decode(runs):
    if not runs:
        return np.zeros(0, dtype=np.int64)
    labels, lengths = zip(*runs)
    return np.repeat(np.array(labels, dtype=np.int64), lengths)


def sample_to_record(sample):
    return {
        "chain": int(sample.chain),
        "iteration": int(sample.iteration),
        "K": int(sample.features.num_features),
        "alpha": float(sample.alpha),
        "gamma": float(sample.gamma),
        "kappa": float(sample.kappa),
        "log_likelihood": float(sample.log_likelihood),
        "log_joint": float(sample.extra.get("log_joint", float("nan"))),
        "F": sample.features.flags.astype(int).tolist(),
        "behaviors": [{"A": b.A.tolist(), "Sigma": b.Sigma.tolist()} for b in sample.behaviors],
        "log_eta": [le.tolist() for le in sample.log_eta],
        "modes": None if sample.modes is None else [run_length_encode(z) for z in sample.modes],
    }


def record_to_sample(rec):
    K = rec["K"]
    n_series = len(rec["F"])
    flags = np.array(rec["F"], dtype=bool).reshape(n_series, K)
    return PosteriorSample(
        iteration=rec["iteration"],
        features=FeatureMatrix(flags),
        behaviors=[VarBehavior(b["A"], b["Sigma"]) for b in rec["behaviors"]],
        log_eta=[np.array(le, dtype=float).reshape(K, K) for le in rec["log_eta"]],
        alpha=rec["alpha"],
        gamma=rec["gamma"],
        kappa=rec["kappa"],
        modes=None if rec["modes"] is None else [run_length_decode(r) for r in rec["modes"]],
        log_likelihood=rec["log_likelihood"],
        chain=rec["chain"],
        extra={"log_joint": rec["log_joint"]},
    )


def format_record(sample):
    return json.dumps(sample_to_record(sample), separators=(",", ":")) + "\n"


def write_samples(samples, path, append=False):
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(format_record(s))


def read_samples(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_to_sample(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise InvalidInputError(f"{path}:{n}: malformed sample record ({e})") from None
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt, path):
    payload = pickle.dumps(ckpt, protocol=pickle.HIGHEST_PROTOCOL)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(CHECKPOINT_TAG + CHECKPOINT_VERSION.to_bytes(2, "big") + payload)
    tmp.replace(path)


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    n = len(CHECKPOINT_TAG)
    if blob[:n] != CHECKPOINT_TAG:
        raise InvalidInputError(f"{path}: not a checkpoint file")
    version = int.from_bytes(blob[n : n + 2], "big")
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    return pickle.loads(blob[n + 2 :])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

CONFIG_SECTIONS = {
    "run": ("iterations", "burn_in", "thin", "chains", "seed", "lag", "init_blocks", "checkpoint_every"),
    "hyperparameters": ("a_alpha", "b_alpha", "a_gamma", "b_gamma", "a_kappa", "b_kappa",
                        "sigma2_gamma", "sigma2_kappa"),
    "initial": ("alpha", "gamma", "kappa"),
    "prior": ("k_scale", "n0_offset", "s0_factor"),
    "simulate": ("preset", "seed", "count"),
}

DEFAULT_CONFIG = """\
# Sampler configuration.  Every default below is the setting used for the
# synthetic experiments; omitted keys keep their defaults.

[run]
iterations = 1000
burn_in = 0
thin = 1
chains = 1
seed = 0
# autoregressive order r
lag = 1
# contiguous blocks per series at initialization, each a unique feature
init_blocks = 5
# write a checkpoint every this many iterations (0: only at the end)
checkpoint_every = 0

[hyperparameters]
# gamma priors (shape, rate) on alpha, gamma and kappa
a_alpha = 1.0
b_alpha = 1.0
a_gamma = 1.0
b_gamma = 1.0
a_kappa = 100.0
b_kappa = 1.0
# variances of the gamma proposals for gamma and kappa
sigma2_gamma = 1.0
sigma2_kappa = 100.0

[initial]
# starting values; leave empty to draw from the prior
alpha =
gamma =
kappa =

[prior]
# matrix-normal inverse-Wishart prior: M = 0, K = k_scale * I,
# n0 = d + n0_offset, S0 = s0_factor * covariance of first differences
k_scale = 0.1
n0_offset = 2.0
s0_factor = 0.75

[simulate]
preset = paper-6.2
seed = 0
# number of held-out datasets for paper-6.2-heldout
count = 100
"""


def parse_config(text, source="<config>"):
    """Parse INI text.  Returns ``{section: {key: raw string}}``; unknown
    sections or keys raise :class:`ConfigError` naming them."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}".splitlines()[0], "syntax") from None
    out = {}
    for sec in cp.sections():
        if sec not in CONFIG_SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}]", sec)
        for key in cp[sec]:
            if key not in CONFIG_SECTIONS[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]", f"{sec}.{key}")
        out[sec] = dict(cp[sec])
    return out


def load_config(path=None, overrides=None):
    """Build a :class:`~bparhmm.driver.RunConfig` from an INI file.

    Returns ``(config, simulate_section)``.  ``overrides`` maps RunConfig field
    names to values that win over the file.
    """
    from .driver import RunConfig

    sections = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}", "config") from None
        sections = parse_config(text, str(path))
    types = {f.name: f.type for f in fields(RunConfig)}
    kwargs = {}
    for sec in ("run", "hyperparameters", "initial", "prior"):
        for key, raw in sections.get(sec, {}).items():
            raw = raw.strip()
            if raw == "":
                if sec == "initial":
                    continue
                raise ConfigError(f"empty value for {key!r}", f"{sec}.{key}")
            conv = int if types[key] == "int" else float
            try:
                kwargs[key] = conv(raw)
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key!r}", f"{sec}.{key}") from None
    for key, v in (overrides or {}).items():
        if v is not None:
            kwargs[key] = v
    config = RunConfig(**kwargs)
    simulate = {"preset": "paper-6.2", "seed": config.seed, "count": 100}
    for key, raw in sections.get("simulate", {}).items():
        if key == "preset":
            simulate[key] = raw.strip()
        else:
            try:
                simulate[key] = int(raw)
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key!r}", f"simulate.{key}") from None
    return config, simulate
