"""Anytime-valid prediction intervals across exits for regression.

For a test input the running log predictive-likelihood ratio

    log R_t(y) = sum_l log N(y; m_l, v_l + s2_l) - log N(y; h_l^T W_l, s2_l),
    W_l ~ posterior at exit l,

is a convex quadratic ``a y^2 + b y + c``. The interval at exit ``t`` is
``{y : log R_t(y) <= log(1/alpha)}``, intersected with all earlier ones; an
empty intersection means the sequence has collapsed (the input looks
out-of-distribution).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .bayes import predictive, sample_weights
from .errors import InvalidArgument, NumericalError

DEGENERATE_TOL = 1e-12


def substream(*keys):
    """Independent generator keyed by integers, e.g. ``(seed, point, sequence)``."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


@dataclass(frozen=True)
class RatioCoefficients:
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    exit: int = 0

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return self.a * y * y + self.b * y + self.c


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    empty: bool = False

    @classmethod
    def nothing(cls):
        return cls(math.nan, math.nan, True)

    @classmethod
    def everything(cls):
        return cls(-math.inf, math.inf)

    @property
    def length(self):
        return 0.0 if self.empty else self.upper - self.lower

    def __contains__(self, y):
        return (not self.empty) and self.lower <= y <= self.upper

    def intersect(self, other):
        if self.empty or other.empty:
            return PredictionInterval.nothing()
        lo, hi = max(self.lower, other.lower), min(self.upper, other.upper)
        return PredictionInterval(lo, hi) if lo <= hi else PredictionInterval.nothing()

    def clip(self, bounds):
        if bounds is None:
            return self
        return self.intersect(PredictionInterval(float(bounds[0]), float(bounds[1])))

    def to_list(self):
        return None if self.empty else [self.lower, self.upper]

    @classmethod
    def from_list(cls, value):
        return cls.nothing() if value is None else cls(float(value[0]), float(value[1]))


@dataclass(frozen=True)
class SequenceState:
    alpha: float
    coefficients: RatioCoefficients = RatioCoefficients()
    running_interval: PredictionInterval = PredictionInterval.everything()
    collapsed_at: int | None = None
    per_exit_raw: tuple = ()
    per_exit_running: tuple = ()
    rng_seed: tuple | None = None
    clip: tuple | None = None
    members: tuple = field(default=(), repr=False)

    @property
    def exit(self):
        return len(self.per_exit_running)

    @property
    def collapsed(self):
        return self.collapsed_at is not None

    def to_record(self, point_id, exits=None, **extra):
        """JSON-ready dict; exits after a collapse are reported as empty."""
        exits = exits or self.exit
        raw = [iv.to_list() for iv in self.per_exit_raw] + [None] * (exits - len(self.per_exit_raw))
        running = [iv.to_list() for iv in self.per_exit_running] + [None] * (exits - len(self.per_exit_running))
        record = {"point_id": point_id, "raw": raw, "running": running, "collapsed_at": self.collapsed_at}
        if self.rng_seed is not None:
            record["seed"] = list(self.rng_seed)
        record.update(extra)
        return record


def coefficient_increments(noise_var, epistemic_var, pred_mean, sampled_mean):
    """Contribution of one exit (and one weight sample) to ``(a, b, c)``."""
    s2, v = noise_var, epistemic_var
    tot = v + s2
    da = 0.5 * (1.0 / s2 - 1.0 / tot)
    db = pred_mean / tot - sampled_mean / s2
    dc = 0.5 * (sampled_mean**2 / s2 - pred_mean**2 / tot + math.log(s2 / tot))
    return da, db, dc


def update_coefficients(state, posterior, feature, weight_sample):
    """Add exit ``t``'s terms to the quadratic; several samples may be given as rows."""
    moments = predictive(posterior, feature)
    samples = np.atleast_2d(np.asarray(weight_sample, dtype=float))
    co = state.coefficients
    a, b, c = co.a, co.b, co.c
    for w in samples:
        da, db, dc = coefficient_increments(posterior.noise_var, moments.epistemic_var, moments.mean, float(w @ feature))
        a, b, c = a + da, b + db, c + dc
    if not all(map(math.isfinite, (a, b, c))):
        raise NumericalError(f"non-finite log-ratio coefficients at exit {co.exit + 1}")
    return replace(state, coefficients=RatioCoefficients(a, b, c, co.exit + 1))


def solve_interval(coeffs, alpha, tol=DEGENERATE_TOL):
    """Solve ``a y^2 + b y + c + log(alpha) <= 0`` for ``y``."""
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    a, b = coeffs.a, coeffs.b
    g = coeffs.c + math.log(alpha)
    if a <= tol:
        if abs(b) <= tol:
            return PredictionInterval.everything() if g <= 0 else PredictionInterval.nothing()
        root = -g / b
        return PredictionInterval(-math.inf, root) if b > 0 else PredictionInterval(root, math.inf)
    disc = b * b - 4.0 * a * g
    if disc < 0:
        return PredictionInterval.nothing()
    sq = math.sqrt(disc)
    # cancellation-free roots
    q = -0.5 * (b + math.copysign(sq, b))
    if q == 0.0:
        return PredictionInterval(0.0, 0.0)
    r1, r2 = q / a, g / q
    return PredictionInterval(min(r1, r2), max(r1, r2))


def step(state, posterior, feature, rng, samples=1):
    """One exit of the sequence: sample, update, solve, intersect."""
    if state.collapsed:
        raise InvalidArgument(f"sequence already collapsed at exit {state.collapsed_at}")
    w = sample_weights(posterior, samples, rng)
    state = update_coefficients(state, posterior, feature, w)
    raw = solve_interval(state.coefficients, state.alpha).clip(state.clip)
    running = state.running_interval.intersect(raw)
    return replace(
        state,
        running_interval=running,
        per_exit_raw=state.per_exit_raw + (raw,),
        per_exit_running=state.per_exit_running + (running,),
        collapsed_at=state.exit + 1 if running.empty else None,
    )


def run_sequence(posteriors, features, alpha, rng, samples_per_exit=None, clip=None, seed=None):
    """Run every exit in order, stopping at the first collapse."""
    state = SequenceState(alpha=alpha, clip=tuple(clip) if clip is not None else None, rng_seed=seed)
    for t, (post, h) in enumerate(zip(posteriors, features)):
        s = 1 if samples_per_exit is None else int(samples_per_exit[t])
        if s < 1:
            raise InvalidArgument("samples per exit must be >= 1")
        state = step(state, post, h, rng, samples=s)
        if state.collapsed:
            break
    return state


def run_parallel(posteriors, features, s, alpha, seed, clip=None):
    """Intersect ``s`` independent single-sample sequences at every exit.

    ``seed`` is a tuple of integers; sequence ``j`` draws from
    ``substream(*seed, j)``, so results do not depend on execution order.
    """
    if s < 1:
        raise InvalidArgument("parallel count must be >= 1")
    seed = tuple(np.atleast_1d(seed).tolist())
    clip = tuple(clip) if clip is not None else None
    rngs = [substream(*seed, j) for j in range(s)]
    members = [SequenceState(alpha=alpha, clip=clip, rng_seed=seed + (j,)) for j in range(s)]
    combined = SequenceState(alpha=alpha, clip=clip, rng_seed=seed)
    for post, h in zip(posteriors, features):
        members = [step(m, post, h, r) for m, r in zip(members, rngs)]
        raw = PredictionInterval.everything()
        for m in members:
            raw = raw.intersect(m.per_exit_raw[-1])
        running = combined.running_interval.intersect(raw)
        combined = replace(
            combined,
            coefficients=members[0].coefficients,
            running_interval=running,
            per_exit_raw=combined.per_exit_raw + (raw,),
            per_exit_running=combined.per_exit_running + (running,),
            collapsed_at=combined.exit + 1 if running.empty else None,
        )
        if running.empty:
            break
        # members whose own sequence collapsed would make ``running`` empty above
    return replace(combined, members=tuple(members))


def run_multisample(posteriors, features, s_per_exit, alpha, seed, clip=None):
    """Single sequence drawing ``s_per_exit[t]`` weight samples at exit ``t``."""
    seed = tuple(np.atleast_1d(seed).tolist())
    if len(s_per_exit) < len(posteriors):
        raise InvalidArgument("need one sample count per exit")
    return run_sequence(posteriors, features, alpha, substream(*seed, 0), s_per_exit, clip, seed)


# -- brute-force reference ---------------------------------------------------------

def log_ratio_direct(posteriors, features, weight_samples, y):
    """Cumulative ``log R_t(y)`` per exit from explicit Gaussian log densities.

    Returns an array of shape ``(exits, len(y))``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out, total = [], np.zeros_like(y)
    for post, h, ws in zip(posteriors, features, weight_samples):
        pm = float(h @ post.mean)
        pv = float(h @ post.covariance @ h) + post.noise_var
        for w in np.atleast_2d(ws):
            total = total + norm.logpdf(y, pm, math.sqrt(pv)) - norm.logpdf(y, float(w @ h), math.sqrt(post.noise_var))
        out.append(total.copy())
    return np.array(out)


def grid_set_oracle(posteriors, features, weight_samples, alpha, grid):
    """Grid points with ``R_t(y) <= 1/alpha`` at each exit (boolean masks)."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise InvalidArgument("grid must be non-empty")
    return log_ratio_direct(posteriors, features, weight_samples, grid) <= math.log(1.0 / alpha)


# -- batches of test points --------------------------------------------------------

def run_points(posteriors, feature_set, alpha, seed, parallel=1, multisample=None, clip=None, threads=1):
    """Construct the sequence for every row of a FeatureSet.

    Point ``i`` uses seed ``(seed, i)``; the output order follows the rows
    and is independent of ``threads``.
    """
    n = feature_set.n
    mats = feature_set.per_exit

    def one(i):
        feats = [m[i] for m in mats]
        if multisample is not None:
            return run_multisample(posteriors, feats, multisample, alpha, (seed, i), clip)
        return run_parallel(posteriors, feats, parallel, alpha, (seed, i), clip)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


def dump_records(states, path, exits, truths=None, method="eenn-avcs"):
    with open(path, "w") as fh:
        for i, st in enumerate(states):
            extra = {"method": method}
            if truths is not None:
                extra["y"] = float(truths[i])
            fh.write(json.dumps(st.to_record(i, exits, **extra), sort_keys=True) + "\n")
