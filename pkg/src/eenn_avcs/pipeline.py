"""End-to-end experiment runner.

``run_experiment`` trains (or loads) the backbone, fits the per-exit heads,
builds the nested sets for every test point, and writes a results
directory::

    manifest.json      resolved config, config hash, seeds, formats
    model.json         backbone checkpoint (generated datasets only)
    posteriors.json    per-exit Bayesian heads (regression)
    schedule.json      per-exit thresholds (classification)
    points.jsonl       per-point sets for every method
    metrics.csv/.json  per-exit metrics recomputed from points.jsonl
    ood_points.jsonl   grid sweep with collapse exit and epistemic variance
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from . import classification as cls_
from . import metrics as M
from . import regression as reg
from .backbone import (
    FeatureSet,
    TrainConfig,
    extract_features,
    extract_logits,
    load_features,
    save_model,
    train_backbone,
)
from .bayes import fit_exits, predictive_batch, save_posteriors
from .config import config_hash, is_classification
from .data import generate, gen_ood_grid, save_dataset

log = logging.getLogger(__name__)
FORMAT_VERSION = 1

DECISIONS = [
    "features carry a trailing constant-1 bias column",
    "noise and prior variances chosen per exit by type-II maximum likelihood (25x25 log grid + golden refinement)",
    "parallel sequences use substreams keyed by (seed, point, sequence)",
    "classification exits use substreams keyed by (seed, point, exit)",
    "concentrations: logits >= tau kept, others pruned (hard threshold)",
    "thresholds calibrated against running-intersection sets",
    "classification baseline: credible sets from the softmax of the exit logits",
    M.EMPTY_SET_CONVENTION,
]


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.__cause__ = exc


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def train_config(cfg):
    b = cfg["backbone"]
    return TrainConfig(
        exits=int(b["exits"]),
        hidden=int(b["hidden"]),
        epochs=int(b["epochs"]),
        lr=float(b["lr"]),
        momentum=float(b["momentum"]),
        weight_decay=float(b["weight_decay"]),
        batch_size=b["batch_size"],
        seed=int(b["seed"]),
    )


# -- records -------------------------------------------------------------------

def bayes_regression_records(posteriors, feature_set, truths, n_std, clip):
    records = []
    means, totals = [], []
    for post, mat in zip(posteriors, feature_set.per_exit):
        m, _, tot = predictive_batch(post, mat)
        means.append(m)
        totals.append(tot)
    half = n_std * np.sqrt(np.array(totals))
    means = np.array(means)
    for i in range(feature_set.n):
        raw = [reg.PredictionInterval(float(means[t, i] - half[t, i]), float(means[t, i] + half[t, i])).clip(clip)
               for t in range(len(posteriors))]
        records.append(_set_record(i, raw, "eenn-bayes", y=float(truths[i])))
    return records


def bayes_class_records(logits, labels, alpha):
    probs = [cls_.softmax(z) for z in logits.per_exit]
    records = []
    for i in range(logits.n):
        raw = [M.bayes_credible_set(p[i], 1.0 - alpha) for p in probs]
        records.append(_set_record(i, raw, "eenn-bayes", label=int(labels[i])))
    return records


def _set_record(point_id, raw, method, **extra):
    running = M.running_intersection(raw)
    collapsed = next((t + 1 for t, s in enumerate(running) if M.is_empty(s)), None)
    enc = (lambda s: s.to_list()) if isinstance(raw[0], reg.PredictionInterval) else sorted
    rec = {"point_id": point_id, "method": method, "raw": [enc(s) for s in raw],
           "running": [enc(s) for s in running], "collapsed_at": collapsed}
    rec.update(extra)
    return rec


def decode_sets(record, field):
    if "label" in record:
        return [frozenset(s) for s in record[field]]
    return [reg.PredictionInterval.from_list(s) for s in record[field]]


def metric_views(method):
    if method.startswith("eenn-bayes"):
        return [(method, "raw"), (method + "-intersection", "running")]
    return [(method, "running")]


def metrics_from_records(records):
    """Per-exit metrics for every method present, computed only from records."""
    by_method = {}
    for r in records:
        by_method.setdefault(r["method"], []).append(r)
    out = []
    for method in sorted(by_method):
        recs = sorted(by_method[method], key=lambda r: r["point_id"])
        truths = [r["label"] if "label" in r else r["y"] for r in recs]
        for name, field in metric_views(method):
            out.append(M.evaluate(name, [decode_sets(r, field) for r in recs], truths))
    return out


def write_records(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_records(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- run -----------------------------------------------------------------------

@dataclass
class RunResult:
    out_dir: Path
    metrics: list
    extras: dict


def run_experiment(cfg):
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    if is_classification(cfg):
        records, extras = _run_classification(cfg, out)
    else:
        records, extras = _run_regression(cfg, out)
    with _stage("metrics"):
        write_records(records, out / "points.jsonl")
        recs = metrics_from_records(records)
        for rec in recs:
            n = rec.nestedness[~np.isnan(rec.nestedness)]
            if rec.method.startswith("eenn-avcs") and np.any(n != 1.0):
                raise AssertionError(f"{rec.method} sets are not nested: {n.min()}")
        M.write_metrics(recs, out / "metrics.csv", out / "metrics.json")
    with _stage("manifest"):
        manifest = {
            "format_version": FORMAT_VERSION,
            "package_version": _version(),
            "config": cfg,
            "config_hash": config_hash(cfg),
            "seeds": {k: cfg[k]["seed"] for k in ("dataset", "backbone", "avcs", "calibration")},
            "decisions": DECISIONS,
            "files": sorted(p.name for p in out.iterdir()) + ["manifest.json"],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunResult(out, recs, extras)


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _load_external(cfg):
    ext = cfg["dataset"]["external"]
    loaded = {split: load_features(path) for split, path in ext.items() if split in ("train", "val", "test")}
    for split, obj in loaded.items():
        if obj.targets is None:
            raise ValueError(f"external {split} directory has no targets.csv")
    return loaded


def _run_regression(cfg, out):
    a = cfg["avcs"]
    clip = tuple(a["clip"]) if a["clip"] is not None else None
    model = dataset = None
    with _stage("data"):
        if cfg["dataset"].get("external"):
            ext = _load_external(cfg)
            f_train, f_test = ext["train"], ext["test"]
            y_train, y_test = f_train.targets, f_test.targets
        else:
            dataset = generate(cfg["dataset"]["generator"], cfg["dataset"]["params"], cfg["dataset"]["seed"])
            save_dataset(dataset, out / "dataset.csv")
    if dataset is not None:
        with _stage("train"):
            model = train_backbone(dataset, train_config(cfg))
            save_model(model, out / "model.json")
        with _stage("features"):
            x_train, y_train = dataset.subset("train")
            x_test, y_test = dataset.subset("test")
            f_train = extract_features(model, x_train, "train")
            f_test = extract_features(model, x_test, "test")
    with _stage("fit"):
        prior = None
        if model is not None and cfg["bayes"]["prior_mean"] == "head":
            prior = [model.head_weights(t)[:, 0] for t in range(model.exits)]
        posteriors, searches = fit_exits(f_train, y_train, prior, tie=bool(cfg["bayes"]["tie"]))
        save_posteriors(posteriors, out / "posteriors.json", searches)
    with _stage("avcs"):
        exits = len(posteriors)
        states = reg.run_points(
            posteriors, f_test, a["alpha"], a["seed"], parallel=int(a["parallel"]),
            multisample=a["multisample"], clip=clip, threads=int(cfg["threads"]),
        )
        records = [st.to_record(i, exits, method="eenn-avcs", y=float(y_test[i])) for i, st in enumerate(states)]
        records += bayes_regression_records(posteriors, f_test, y_test, float(cfg["bayes"]["n_std"]), clip)
    extras = {}
    if model is not None and cfg["ood"]["enabled"]:
        with _stage("ood"):
            grid = gen_ood_grid(dataset, int(cfg["ood"]["n_test"]), float(cfg["ood"]["margin"]))
            f_grid = extract_features(model, grid, "grid")
            g_states = reg.run_points(
                posteriors, f_grid, a["alpha"], a["seed"] + 1, parallel=int(a["parallel"]),
                multisample=a["multisample"], clip=clip, threads=int(cfg["threads"]),
            )
            v = np.array([predictive_batch(p, m)[1] for p, m in zip(posteriors, f_grid.per_exit)])
            with open(out / "ood_points.jsonl", "w") as fh:
                for i, st in enumerate(g_states):
                    rec = st.to_record(i, exits, x=float(grid[i]), epistemic_var=v[:, i].tolist(),
                                       mean_epistemic_var=float(v[:, i].mean()))
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            extras["ood"] = {"x": grid, "collapsed": np.array([s.collapsed for s in g_states]), "v": v}
    return records, extras


def _run_classification(cfg, out):
    a = cfg["avcs"]
    with _stage("data"):
        if cfg["dataset"].get("external"):
            ext = _load_external(cfg)
            if "val" not in ext:
                raise ValueError("classification needs an external 'val' directory for calibration")
            l_val, l_test = ext["val"], ext["test"]
            y_val, y_test = l_val.targets, l_test.targets
            dataset = None
        else:
            dataset = generate(cfg["dataset"]["generator"], cfg["dataset"]["params"], cfg["dataset"]["seed"])
            save_dataset(dataset, out / "dataset.csv")
    if dataset is not None:
        with _stage("train"):
            model = train_backbone(dataset, train_config(cfg))
            save_model(model, out / "model.json")
        with _stage("features"):
            x_val, y_val = dataset.subset("val")
            x_test, y_test = dataset.subset("test")
            l_val = extract_logits(model, x_val, "val")
            l_test = extract_logits(model, x_test, "test")
    with _stage("calibrate"):
        c = cfg["calibration"]
        schedule = cls_.calibrate_taus(l_val, y_val, c["alpha"], c["seed"])
        cls_.save_schedule(schedule, out / "schedule.json")
    with _stage("avcs"):
        exits = l_test.exits
        states = cls_.run_points(l_test, schedule, a["alpha"], a["seed"])
        records = [st.to_record(i, exits, method="eenn-avcs", label=int(y_test[i])) for i, st in enumerate(states)]
        val_states = cls_.run_points(l_val, schedule, c["alpha"], c["seed"])
        records += [st.to_record(i, exits, method="eenn-avcs-val", label=int(y_val[i])) for i, st in enumerate(val_states)]
        records += bayes_class_records(l_test, y_test, a["alpha"])
    return records, {"schedule": schedule}


def report(results_dir, out_dir=None):
    """Recompute metric tables from a results directory's ``points.jsonl``."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir) if out_dir else results_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    recs = metrics_from_records(read_records(results_dir / "points.jsonl"))
    M.write_metrics(recs, out_dir / "metrics.csv", out_dir / "metrics.json")
    return recs, out_dir
