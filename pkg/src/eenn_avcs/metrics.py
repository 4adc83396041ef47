"""Per-exit nestedness, coverage, size and collapse rates, plus Bayes baselines.

Sets are either :class:`~eenn_avcs.regression.PredictionInterval` objects
(measured by length) or ``frozenset`` of class indices (measured by
cardinality). Points whose set at exit ``t`` is empty are left out of the
nestedness mean at ``t`` and counted in the collapse rate; for coverage and
size they count as not covering, with size 0.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bayes import predictive
from .errors import InvalidArgument
from .regression import PredictionInterval

EMPTY_SET_CONVENTION = (
    "empty sets: excluded from nestedness mean, counted in collapse_rate, non-covering with size 0"
)
CSV_COLUMNS = ("exit", "nestedness", "coverage", "mean_size", "collapse_rate", "method")


def is_empty(s):
    return s.empty if isinstance(s, PredictionInterval) else len(s) == 0


def size(s):
    return s.length if isinstance(s, PredictionInterval) else len(s)


def intersect(a, b):
    return a.intersect(b) if isinstance(a, PredictionInterval) else frozenset(a) & frozenset(b)


def contains(s, truth):
    return truth in s


def running_intersection(sets):
    out, acc = [], None
    for s in sets:
        acc = s if acc is None else intersect(acc, s)
        out.append(acc)
    return out


def _nested_ratio(inter, current):
    num, den = size(inter), size(current)
    if den == 0 or math.isinf(den):
        return 1.0 if inter == current else 0.0
    return num / den


def nestedness(per_point_sets):
    """Mean of ``|C_1 & ... & C_t| / |C_t|`` over points with non-empty ``C_t``."""
    if not per_point_sets:
        return np.array([])
    exits = len(per_point_sets[0])
    totals, counts = np.zeros(exits), np.zeros(exits)
    for sets in per_point_sets:
        for t, (inter, cur) in enumerate(zip(running_intersection(sets), sets)):
            if is_empty(cur):
                continue
            totals[t] += _nested_ratio(inter, cur)
            counts[t] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)


def coverage_and_size(per_point_sets, truths):
    if len(per_point_sets) != len(truths):
        raise InvalidArgument("need exactly one truth per point")
    cov = np.array([[contains(s, y) for s in sets] for sets, y in zip(per_point_sets, truths)], dtype=float)
    sz = np.array([[size(s) for s in sets] for sets in per_point_sets], dtype=float)
    return cov.mean(axis=0), sz.mean(axis=0)


def collapse_rate(per_point_sets):
    """Fraction of points whose set has been empty at some exit ``<= t``."""
    flags = np.array([[is_empty(s) for s in sets] for sets in per_point_sets], dtype=bool)
    return np.logical_or.accumulate(flags, axis=1).mean(axis=0)


def bayes_interval(posterior, feature, n_std=2.0, clip=None):
    if n_std <= 0:
        raise InvalidArgument("n_std must be positive")
    m = predictive(posterior, feature)
    half = n_std * math.sqrt(m.total_var)
    return PredictionInterval(m.mean - half, m.mean + half).clip(clip)


def bayes_credible_set(probs, mass, tol=1e-12):
    """Most probable classes, added greedily until their mass reaches ``mass``.

    Ties go to the lower class index; ``tol`` absorbs round-off in the
    cumulative sum.
    """
    p = np.asarray(probs, dtype=float)
    order = sorted(range(len(p)), key=lambda k: (-p[k], k))
    chosen, total = [], 0.0
    for k in order:
        if total >= mass - tol or p[k] <= 0:
            break
        chosen.append(k)
        total += p[k]
    return frozenset(chosen)


def stability_diagnostic(posteriors, feature_per_exit):
    """Epistemic variance ``h^T Sigma h`` at every exit and its mean."""
    v = np.array([predictive(p, h).epistemic_var for p, h in zip(posteriors, feature_per_exit)])
    return v, float(v.mean())


@dataclass
class MetricsRecord:
    method: str
    n_points: int
    nestedness: np.ndarray
    coverage: np.ndarray
    mean_size: np.ndarray
    collapse_rate: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def exits(self):
        return len(self.coverage)

    def rows(self):
        for t in range(self.exits):
            yield {
                "exit": t + 1,
                "nestedness": float(self.nestedness[t]),
                "coverage": float(self.coverage[t]),
                "mean_size": float(self.mean_size[t]),
                "collapse_rate": float(self.collapse_rate[t]),
                "method": self.method,
            }

    def to_json(self):
        return {
            "method": self.method,
            "n_points": self.n_points,
            "per_exit": list(self.rows()),
            "convention": EMPTY_SET_CONVENTION,
            **self.meta,
        }


def evaluate(method, per_point_sets, truths, **meta):
    cov, sz = coverage_and_size(per_point_sets, truths)
    return MetricsRecord(method, len(per_point_sets), nestedness(per_point_sets), cov, sz, collapse_rate(per_point_sets), meta)


def metrics_csv(records):
    """CSV text for several records, stable-sorted by exit then method."""
    rows = sorted((r for rec in records for r in rec.rows()), key=lambda r: (r["exit"], r["method"]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r["exit"]] + [repr(r[k]) for k in CSV_COLUMNS[1:5]] + [r["method"]])
    return buf.getvalue()


def write_metrics(records, csv_path, json_path=None):
    with open(csv_path, "w", newline="") as fh:
        fh.write(metrics_csv(records))
    if json_path is not None:
        summary = {"convention": EMPTY_SET_CONVENTION, "records": [rec.to_json() for rec in records]}
        with open(json_path, "w") as fh:
            fh.write(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
