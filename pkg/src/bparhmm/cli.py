"""Command-line interface.

Subcommands: ``simulate``, ``preprocess``, ``fit``, ``select``, ``evaluate``,
``predict``.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .driver import RunConfig, chain_seeds, resume_chain, run_chain, start_chain
from .errors import ConfigError, InvalidInputError, NumericFailure
from .evaluation import (
    hamming_matched,
    heldout_predictive_loglik,
    select_min_expected_hamming,
    summarize_feature_matrix,
)
from .model import Dataset, TimeSeries
from .synthetic import PRESETS, preset

logger = logging.getLogger("bparhmm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _output_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _model_summary(model):
    return {
        "features": model.features.flags.astype(int).tolist(),
        "behaviors": [{"A": b.A.tolist(), "Sigma": b.Sigma.tolist()} for b in model.behaviors],
        "transitions": [P.tolist() for P in model.transitions],
        "lag": model.lag,
        **model.meta,
    }


def _write_truth(out, ds, truth, model, stem=""):
    formats.write_dataset(ds, out / f"{stem}dataset.csv")
    formats.write_labels(ds.ids(), truth, out / f"{stem}truth_labels.csv", ds.lag)
    formats.write_feature_matrix(ds.ids(), model.features, out / f"{stem}truth_features.csv")


def cmd_simulate(args):
    _, sim = formats.load_config(args.config)
    name = args.preset or sim["preset"]
    seed = args.seed if args.seed is not None else sim["seed"]
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", "simulate.preset")
    out = _output_dir(args.output)
    files = []
    if name == "paper-6.2-heldout":
        count = args.count if args.count is not None else sim["count"]
        model, sets = preset(name, seed, count=count)
        for j, (ds, truth) in enumerate(sets):
            stem = f"heldout_{j:03d}_"
            _write_truth(out, ds, truth, model, stem)
            files.append(stem + "dataset.csv")
    else:
        model, [(ds, truth)] = preset(name, seed)
        _write_truth(out, ds, truth, model)
        files.append("dataset.csv")
    _write_json({"preset": name, "seed": seed, "datasets": files, "model": _model_summary(model)},
                out / "manifest.json")
    logger.info("wrote %d dataset(s) to %s", len(files), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def block_average(y, window):
    T = y.shape[0]
    if window > T:
        raise InvalidInputError(f"window {window} exceeds series length {T}")
    n = T // window
    return y[: n * window].reshape(n, window, -1).mean(axis=1)


def first_difference_scale(series):
    """Per-dimension factor making the pooled first-difference variance one."""
    diffs = np.vstack([np.diff(y, axis=0) for y in series])
    sd = diffs.std(axis=0)
    if diffs.shape[0] < 2 or np.any(sd <= 0):
        raise InvalidInputError("first differences have zero variance; cannot rescale")
    return 1.0 / sd


def preprocess(dataset, window=1, rescale=False):
    """Block-average by ``window`` then optionally rescale each dimension.
    Returns ``(dataset, params)``; ``params`` inverts the rescale."""
    if window < 1:
        raise ConfigError("window must be >= 1", "window")
    ys = [block_average(s.observations, window) if window > 1 else s.observations for s in dataset.series]
    scale = first_difference_scale(ys) if rescale else np.ones(dataset.dim)
    out = Dataset([TimeSeries(s.id, y * scale) for s, y in zip(dataset.series, ys)], dataset.lag)
    return out, {"window": window, "rescale": bool(rescale), "scale": scale.tolist()}


def cmd_preprocess(args):
    ds = formats.read_dataset(args.input)
    out, params = preprocess(ds, args.window, args.rescale)
    dest = Path(args.output)
    dest.parent.mkdir(parents=True, exist_ok=True)
    formats.write_dataset(out, dest)
    _write_json(params, dest.with_suffix(".transform.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _fit_chain(dataset, config, chain, out, resume):
    log_path = out / f"chain_{chain}.jsonl"
    ckpt_path = out / f"chain_{chain}.ckpt"
    if resume:
        ckpt = formats.load_checkpoint(ckpt_path)
        state, streams = resume_chain(ckpt, config)
        if not log_path.exists():
            raise InvalidInputError(f"missing sample log {log_path} for resume")
        # drop records written after the checkpoint so the log continues seamlessly
        kept = [ln for ln in log_path.read_text(encoding="utf-8").splitlines(keepends=True)
                if ln.strip() and json.loads(ln)["iteration"] <= state.iteration]
        log_path.write_text("".join(kept), encoding="utf-8")
        mode = "a"
    else:
        state, streams = start_chain(dataset, config, chain)
        mode = "w"

    def checkpoint(ck):
        formats.save_checkpoint(ck, ckpt_path)

    with open(log_path, mode, encoding="utf-8") as fh:
        for sample in run_chain(state, config, streams, chain, checkpoint_fn=checkpoint):
            fh.write(formats.format_record(sample))
    return str(log_path.name)


def _fit_chain_star(args):
    return _fit_chain(*args)


def cmd_fit(args):
    overrides = {"seed": args.seed, "chains": args.chains, "iterations": args.iterations}
    config, _ = formats.load_config(args.config, overrides)
    dataset = formats.read_dataset(args.dataset, config.lag)
    out = _output_dir(args.output)
    if args.resume:
        old = json.loads((out / "manifest.json").read_text())
        if old["config_digest"] != config.digest():
            raise ConfigError("configuration differs from the run being resumed", "resume")
        if old["dataset_sha256"] != _sha256(args.dataset):
            raise InvalidInputError("dataset differs from the run being resumed")
    seeds = chain_seeds(config.seed, config.chains)
    manifest = {
        "config": {k: getattr(config, k) for k in RunConfig.keys()},
        "config_digest": config.digest(),
        "dataset": Path(args.dataset).name,
        "dataset_sha256": _sha256(args.dataset),
        "series": dataset.ids(),
        "chains": [{"chain": c, "entropy": str(s.entropy), "spawn_key": list(s.spawn_key),
                    "log": f"chain_{c}.jsonl", "checkpoint": f"chain_{c}.ckpt"} for c, s in enumerate(seeds)],
    }
    _write_json(manifest, out / "manifest.json")
    work = [(dataset, config, c, out, args.resume) for c in range(config.chains)]
    if args.jobs > 1 and config.chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_fit_chain_star, work))
    else:
        for w in work:
            _fit_chain(*w)
    return EXIT_OK


# ---------------------------------------------------------------------------
# select / evaluate / predict
# ---------------------------------------------------------------------------


def _load_logs(paths, min_iteration=0):
    samples = []
    for p in paths:
        samples.extend(s for s in formats.read_samples(p) if s.iteration >= min_iteration)
    if not samples:
        raise InvalidInputError("no samples at or after the requested iteration")
    return samples


def cmd_select(args):
    ds = formats.read_dataset(args.dataset, args.lag)
    samples = _load_logs(args.samples, args.min_iteration)
    if any(s.modes is None for s in samples):
        raise InvalidInputError("sample records carry no mode sequences")
    modes = [s.modes for s in samples]
    idx, scores = select_min_expected_hamming(modes, modes)
    out = _output_dir(args.output)
    formats._write_rows(out / "scores.csv", ["chain", "iteration", "expected_hamming"],
                        [[s.chain, s.iteration, formats._num(h)] for s, h in zip(samples, scores)])
    best = samples[idx]
    formats.write_labels(ds.ids(), best.modes, out / "selected_labels.csv", ds.lag)
    formats.write_feature_matrix(ds.ids(), best.features, out / "selected_features.csv")
    _write_json({"chain": best.chain, "iteration": best.iteration, "expected_hamming": float(scores[idx])},
                out / "selected.json")
    return EXIT_OK


def cmd_evaluate(args):
    if not args.labels and not args.samples:
        raise ConfigError("evaluate needs --labels and/or --samples", "labels")
    t_ids, _, truth = formats.read_labels(args.truth)
    out = _output_dir(args.output)
    if args.labels:
        e_ids, _, est = formats.read_labels(args.labels)
        if e_ids != t_ids:
            raise InvalidInputError("estimated and true label files list different series")
        rows = [[sid, formats._num(hamming_matched(e, t)[0])] for sid, e, t in zip(t_ids, est, truth)]
        rows.append(["all", formats._num(hamming_matched(est, truth)[0])])
        formats._write_rows(out / "hamming.csv", ["series_id", "hamming"], rows)
    if args.samples:
        samples = _load_logs(args.samples, args.min_iteration)
        summary = summarize_feature_matrix([s.modes for s in samples], truth, args.threshold)
        formats.write_matrix_csv(t_ids, summary, out / "feature_summary.csv")
        rows = [[s.chain, s.iteration, formats._num(hamming_matched(s.modes, truth)[0])] for s in samples]
        formats._write_rows(out / "sample_hamming.csv", ["chain", "iteration", "hamming"], rows)
    return EXIT_OK


def cmd_predict(args):
    samples = _load_logs(args.samples, args.min_iteration)
    out = _output_dir(args.output)
    rows = []
    for path in args.dataset:
        ds = formats.read_dataset(path, args.lag)
        ll = heldout_predictive_loglik(samples, ds)
        rows.extend([Path(path).name, s.chain, s.iteration, formats._num(v)] for s, v in zip(samples, ll))
    formats._write_rows(out / "predictive.csv", ["dataset", "chain", "iteration", "log_likelihood"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bparhmm", description="Beta-process AR-HMM sampler")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic preset")
    s.add_argument("--config")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, help="held-out datasets to write")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="block-average and rescale a dataset")
    s.add_argument("input")
    s.add_argument("--window", type=int, default=1)
    s.add_argument("--rescale", action="store_true", help="unit first-difference variance per dimension")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("fit", help="run the sampler")
    s.add_argument("dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--chains", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--output", required=True)
    s.add_argument("--resume", action="store_true", help="continue from the checkpoints in --output")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_fit)

    for name, func, text in (("select", cmd_select, "pick the minimum expected-Hamming sample"),
                             ("evaluate", cmd_evaluate, "score segmentations against truth"),
                             ("predict", cmd_predict, "held-out log-likelihood of samples")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--samples", nargs="+", required=name != "evaluate")
        s.add_argument("--min-iteration", type=int, default=0)
        s.add_argument("--output", required=True)
        if name == "evaluate":
            s.add_argument("--truth", required=True)
            s.add_argument("--labels")
            s.add_argument("--threshold", type=float, default=0.02)
        else:
            s.add_argument("--dataset", required=True, nargs="+" if name == "predict" else None)
            s.add_argument("--lag", type=int, default=1)
        s.set_defaults(func=func)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error [{e.key}]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidInputError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
