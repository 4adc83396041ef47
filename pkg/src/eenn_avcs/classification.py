"""Nested class sets across exits from post-hoc Dirichlet concentrations.

Logits at exit ``t`` are hard-thresholded at ``tau_t >= 1`` to obtain
Dirichlet concentrations; classes below the threshold are pruned for good.
For each surviving class the running ratio is multiplied by
``(alpha_k / S_t) / pi_k`` with ``pi ~ Dir(alpha_surviving)``. A class stays
in the set while its ratio is at most ``1 / significance``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, NumericalError
from .regression import substream

PI_FLOOR = 1e-300


class EmptySupport(Exception):
    """Every class fell below the threshold; callers treat this as collapse."""


@dataclass(frozen=True, eq=False)
class DirichletExit:
    concentrations: np.ndarray

    @property
    def surviving(self):
        return np.flatnonzero(self.concentrations > 0)

    @property
    def strength(self):
        return float(self.concentrations.sum())


@dataclass(frozen=True)
class ThresholdSchedule:
    taus: tuple
    calibration_alpha: float
    calibration_seed: int = 0
    warnings: tuple = ()

    def to_json(self):
        return {
            "alpha": self.calibration_alpha,
            "taus": list(self.taus),
            "calibration_seed": self.calibration_seed,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, blob):
        return cls(tuple(blob["taus"]), blob["alpha"], blob.get("calibration_seed", 0), tuple(blob.get("warnings", ())))


@dataclass(frozen=True, eq=False)
class ClassRatioState:
    log_ratios: np.ndarray
    running_set: frozenset
    alpha: float
    collapsed_at: int | None = None
    per_exit_raw: tuple = ()
    per_exit_running: tuple = ()

    @classmethod
    def start(cls, n_classes, alpha):
        return cls(np.zeros(n_classes), frozenset(range(n_classes)), alpha)

    @property
    def exit(self):
        return len(self.per_exit_running)

    @property
    def collapsed(self):
        return self.collapsed_at is not None

    def to_record(self, point_id, exits=None, **extra):
        exits = exits or self.exit
        pad = [[] for _ in range(exits - self.exit)]
        record = {
            "point_id": point_id,
            "raw": [sorted(s) for s in self.per_exit_raw] + pad,
            "running": [sorted(s) for s in self.per_exit_running] + pad,
            "collapsed_at": self.collapsed_at,
        }
        record.update(extra)
        return record


def concentrations_from_logits(logits, tau):
    """Keep logits at or above ``tau`` as concentrations; zero out the rest."""
    if tau < 1:
        raise InvalidArgument(f"tau must be >= 1, got {tau}")
    z = np.asarray(logits, dtype=float)
    conc = np.where(z >= tau, z, 0.0)
    if not np.any(conc > 0):
        raise EmptySupport(f"no logit reaches tau={tau}")
    return DirichletExit(conc)


def dirichlet_predictive(exit_):
    if exit_.strength <= 0:
        raise InvalidArgument("no surviving classes")
    return exit_.concentrations / exit_.strength


def sample_pi(exit_, rng):
    """Dirichlet draw over the surviving classes via normalized Gamma variates.

    Returns a full-length vector with zeros at pruned classes.
    """
    idx = exit_.surviving
    if idx.size == 0:
        raise InvalidArgument("no surviving classes")
    pi = np.zeros_like(exit_.concentrations)
    if idx.size == 1:
        pi[idx] = 1.0
        return pi
    g = rng.gamma(exit_.concentrations[idx])
    pi[idx] = np.maximum(g / g.sum(), PI_FLOOR)
    return pi


def _advance(state, raw, log_ratios):
    running = state.running_set & raw
    return replace(
        state,
        log_ratios=log_ratios,
        running_set=running,
        per_exit_raw=state.per_exit_raw + (raw,),
        per_exit_running=state.per_exit_running + (running,),
        collapsed_at=state.exit + 1 if not running else None,
    )


def step_class(state, exit_, pi, alpha=None):
    """Update every class's log ratio with one exit and intersect the sets."""
    if state.collapsed:
        raise InvalidArgument(f"sequence already collapsed at exit {state.collapsed_at}")
    alpha = state.alpha if alpha is None else alpha
    conc = exit_.concentrations
    alive = conc > 0
    if np.any(pi[alive] <= 0):
        raise NumericalError(f"sampled probability is zero for a surviving class at exit {state.exit + 1}")
    log_r = np.full(conc.shape, np.inf)
    log_r[alive] = state.log_ratios[alive] + np.log(conc[alive] / exit_.strength) - np.log(pi[alive])
    raw = frozenset(np.flatnonzero(log_r <= math.log(1.0 / alpha)).tolist())
    return _advance(state, raw, log_r)


def collapse_step(state):
    """Record an exit at which no class survived the threshold."""
    return _advance(state, frozenset(), np.full(state.log_ratios.shape, np.inf))


def exit_rng(seed, point_id, t):
    return substream(seed, point_id, t)


def advance_point(state, logits_t, tau, rng):
    try:
        ex = concentrations_from_logits(logits_t, tau)
    except EmptySupport:
        return collapse_step(state)
    return step_class(state, ex, sample_pi(ex, rng))


def run_classification(logits, schedule, alpha, seed, point_id=0):
    """All exits for one input; ``logits`` is a ``(T, K)`` array.

    Exit ``t`` draws from ``substream(seed, point_id, t)``.
    """
    logits = np.asarray(logits, dtype=float)
    if len(schedule.taus) != logits.shape[0]:
        raise InvalidArgument(f"schedule has {len(schedule.taus)} thresholds for {logits.shape[0]} exits")
    state = ClassRatioState.start(logits.shape[1], alpha)
    for t, tau in enumerate(schedule.taus):
        state = advance_point(state, logits[t], tau, exit_rng(seed, point_id, t))
        if state.collapsed:
            break
    return state


def run_points(logits, schedule, alpha, seed):
    """Run every row of a :class:`~eenn_avcs.backbone.Logits` object."""
    stacked = np.stack(logits.per_exit, axis=1)
    return [run_classification(stacked[i], schedule, alpha, seed, i) for i in range(stacked.shape[0])]


def _threshold_outcomes(state, z, label, tau_grid_fn):
    """States and coverage flags for every distinct surviving set of one exit.

    The surviving set only changes at the point's own logits, so ``tau`` in
    ``[1, z_(1)]`` and each ``(z_(j-1), z_(j)]`` share one outcome; above the
    largest logit nothing survives.
    """
    edges = np.unique(z[z >= 1.0])
    states, flags = [], []
    for edge in edges:
        st = tau_grid_fn(float(edge))
        states.append(st)
        flags.append(label in st.running_set)
    st = collapse_step(state)
    states.append(st)
    flags.append(False)
    return edges, states, np.array(flags)


def calibrate_taus(logits_val, labels_val, alpha, seed=0):
    """Choose the largest per-exit threshold that keeps validation coverage.

    Exits are processed in order with earlier thresholds frozen. Candidate
    thresholds are 1 and every validation logit at or above 1 at that exit.
    Coverage is not monotone in the threshold (pruning a competitor can
    save the true class), so every candidate is evaluated exactly: for a
    given point the outcome only changes at its own logits. If no candidate
    reaches the target the exit gets threshold 1 and a warning.
    """
    labels = np.asarray(labels_val, dtype=int)
    n = labels.shape[0]
    if n == 0:
        raise InvalidArgument("validation split is empty")
    stacked = np.stack(logits_val.per_exit, axis=1)
    exits, k = stacked.shape[1], stacked.shape[2]
    target = 1.0 - alpha
    states = [ClassRatioState.start(k, alpha) for _ in range(n)]
    taus, flagged = [], []

    for t in range(exits):
        col = stacked[:, t, :].ravel()
        cands = np.unique(np.concatenate([[1.0], col[col >= 1.0]]))
        covered = np.zeros((n, cands.size), dtype=bool)
        outcomes = []
        for i, st in enumerate(states):
            if st.collapsed:
                outcomes.append(None)
                continue
            z = stacked[i, t]
            edges, sts, flags = _threshold_outcomes(
                st, z, labels[i], lambda tau, st=st, z=z, i=i: advance_point(st, z, tau, exit_rng(seed, i, t))
            )
            slot = np.searchsorted(edges, cands, side="left")
            covered[i] = flags[slot]
            outcomes.append((edges, sts))
        coverage = covered.mean(axis=0)
        feasible = np.flatnonzero(coverage >= target)
        if feasible.size:
            tau = float(cands[feasible[-1]])
        else:
            warnings.warn(f"exit {t + 1}: no threshold >= 1 reaches coverage {target:.3f}", RuntimeWarning, stacklevel=2)
            flagged.append(t + 1)
            tau = 1.0
        new_states = []
        for st, out in zip(states, outcomes):
            if out is None:
                new_states.append(st)
                continue
            edges, sts = out
            new_states.append(sts[int(np.searchsorted(edges, tau, side="left"))])
        states = new_states
        taus.append(tau)
    return ThresholdSchedule(tuple(taus), alpha, seed, tuple(flagged))


def calibration_coverage(logits_val, labels_val, schedule, seed=None):
    """Per-exit running coverage on the calibration split (the postcondition)."""
    seed = schedule.calibration_seed if seed is None else seed
    states = run_points(logits_val, schedule, schedule.calibration_alpha, seed)
    exits = len(schedule.taus)
    cov = np.zeros(exits)
    for st, y in zip(states, np.asarray(labels_val, dtype=int)):
        for t in range(min(st.exit, exits)):
            cov[t] += y in st.per_exit_running[t]
    return cov / len(states)


def save_schedule(schedule, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(schedule.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def load_schedule(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"schedule not found: {path}", path)
    return ThresholdSchedule.from_json(json.loads(path.read_text()))


def softmax(z):
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
