"""Conjugate Bayesian linear regression for a single exit head.

Likelihood ``y ~ N(h^T W, noise_var)`` and prior ``W ~ N(prior_mean,
prior_var * I)``. Everything here is closed form: the posterior, the
predictive, type-II maximum likelihood for the two variances, and the KL
divergence between the posterior and its one-point update.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import FormatError, InvalidArgument, NumericalError, SingularDesignError

JITTER_SCALE = 1e-9


@dataclass(frozen=True, eq=False)
class ExitPosterior:
    mean: np.ndarray
    covariance: np.ndarray
    noise_var: float
    prior_var: float
    prior_mean: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self):
        return self.mean.shape[0]

    @cached_property
    def cholesky(self):
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"posterior covariance is not positive definite: {exc}") from exc


@dataclass(frozen=True)
class PredictiveMoments:
    mean: float
    epistemic_var: float
    total_var: float


@dataclass(frozen=True)
class EvidenceSearch:
    """Result of the type-II maximum likelihood search."""

    noise_var: float
    prior_var: float
    log_evidence: float
    trace: list = field(default_factory=list)


def fit_posterior(features, targets, noise_var, prior_var, prior_mean=None):
    """Posterior over head weights given training features and targets.

    Precision ``P = H^T H / noise_var + I / prior_var`` and mean
    ``P^{-1} (H^T y / noise_var + prior_mean / prior_var)``, computed through
    a Cholesky factor of ``P``.
    """
    phi = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if phi.ndim != 2 or phi.shape[0] < 1 or phi.shape[0] != y.shape[0]:
        raise InvalidArgument(f"need N >= 1 matching rows, got features {phi.shape} and targets {y.shape}")
    if not (noise_var > 0 and prior_var > 0 and np.isfinite(noise_var) and np.isfinite(prior_var)):
        raise InvalidArgument(f"variances must be finite and positive, got {noise_var}, {prior_var}")
    dim = phi.shape[1]
    m0 = np.zeros(dim) if prior_mean is None else np.asarray(prior_mean, dtype=float)
    precision = phi.T @ phi / noise_var + np.eye(dim) / prior_var
    rhs = phi.T @ y / noise_var + m0 / prior_var
    jitter = 0.0
    try:
        factor = cho_factor(precision, lower=True)
    except LinAlgError:
        jitter = JITTER_SCALE * np.trace(precision) / dim
        warnings.warn(f"posterior precision needed jitter {jitter:.3g}", RuntimeWarning, stacklevel=2)
        try:
            factor = cho_factor(precision + jitter * np.eye(dim), lower=True)
        except LinAlgError as exc:
            raise SingularDesignError(f"cannot factorize posterior precision: {exc}") from exc
    mean = cho_solve(factor, rhs)
    cov = cho_solve(factor, np.eye(dim))
    cov = 0.5 * (cov + cov.T)
    return ExitPosterior(mean, cov, float(noise_var), float(prior_var), m0, jitter)


def update_posterior(posterior, feature, target):
    """Rank-one conjugate update with a single observation ``(feature, target)``."""
    h = np.asarray(feature, dtype=float)
    m = predictive(posterior, h)
    gain = posterior.covariance @ h / m.total_var
    mean = posterior.mean + gain * (float(target) - m.mean)
    cov = posterior.covariance - np.outer(gain, h @ posterior.covariance)
    cov = 0.5 * (cov + cov.T)
    return ExitPosterior(mean, cov, posterior.noise_var, posterior.prior_var, posterior.prior_mean, posterior.jitter)


def predictive(posterior, feature):
    h = np.asarray(feature, dtype=float)
    if h.shape != (posterior.dim,):
        raise InvalidArgument(f"feature has shape {h.shape}, posterior expects ({posterior.dim},)")
    v = max(float(h @ posterior.covariance @ h), 0.0)
    return PredictiveMoments(float(h @ posterior.mean), v, v + posterior.noise_var)


def predictive_batch(posterior, features):
    """Vectorized :func:`predictive` over the rows of ``features``."""
    phi = np.asarray(features, dtype=float)
    mean = phi @ posterior.mean
    v = np.maximum(np.einsum("ij,jk,ik->i", phi, posterior.covariance, phi), 0.0)
    return mean, v, v + posterior.noise_var


def sample_weights(posterior, count, rng):
    """Exact draws ``mean + L z`` with ``L`` the Cholesky factor of the covariance."""
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    z = rng.standard_normal((count, posterior.dim))
    return posterior.mean + z @ posterior.cholesky.T


# -- type-II maximum likelihood --------------------------------------------------

class _Evidence:
    """Log marginal likelihood ``log N(y; H m0, s2 I + sw2 H H^T)`` via one SVD."""

    def __init__(self, features, targets, prior_mean=None):
        phi = np.asarray(features, dtype=float)
        r = np.asarray(targets, dtype=float)
        if prior_mean is not None:
            r = r - phi @ np.asarray(prior_mean, dtype=float)
        u, s, _ = np.linalg.svd(phi, full_matrices=False)
        self.n = phi.shape[0]
        self.sq = s**2
        self.proj2 = (u.T @ r) ** 2
        self.resid2 = max(float(r @ r - self.proj2.sum()), 0.0)
        self.k = len(s)

    def __call__(self, noise_var, prior_var):
        d = noise_var + prior_var * self.sq
        return -0.5 * (
            self.n * math.log(2 * math.pi)
            + np.sum(np.log(d))
            + (self.n - self.k) * math.log(noise_var)
            + np.sum(self.proj2 / d)
            + self.resid2 / noise_var
        )


def _golden_max(f, lo, hi, tol=1e-6):
    """Maximize a unimodal ``f`` on ``[lo, hi]`` by golden-section search."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def empirical_bayes(
    features,
    targets,
    prior_mean=None,
    noise_range=(1e-4, 1e1),
    prior_range=(1e-4, 1e2),
    grid_size=25,
    refine_rounds=3,
):
    """Choose ``(noise_var, prior_var)`` by maximizing the exact evidence.

    A log-spaced ``grid_size x grid_size`` grid is scanned, then each
    coordinate is refined in turn by golden-section search over the
    neighbouring grid cells (in log10 space).

    ``features`` may also be a list of matrices (one per exit sharing the
    same targets), in which case the summed evidence is maximized, giving
    hyperparameters tied across exits.
    """
    if isinstance(features, (list, tuple)):
        means = prior_mean if prior_mean is not None else [None] * len(features)
        parts = [_Evidence(f, targets, m) for f, m in zip(features, means)]
    else:
        parts = [_Evidence(features, targets, prior_mean)]
    if parts[0].n < 2:
        raise InvalidArgument("empirical Bayes needs N >= 2")

    def objective(log_s2, log_sw2):
        val = sum(p(10.0**log_s2, 10.0**log_sw2) for p in parts)
        return val if np.isfinite(val) else -np.inf

    g_s2 = np.linspace(math.log10(noise_range[0]), math.log10(noise_range[1]), grid_size)
    g_sw2 = np.linspace(math.log10(prior_range[0]), math.log10(prior_range[1]), grid_size)
    values = np.array([[objective(a, b) for b in g_sw2] for a in g_s2])
    if not np.any(np.isfinite(values)):
        raise NumericalError("log evidence is non-finite on the entire grid")
    i, j = np.unravel_index(np.argmax(values), values.shape)
    best = [g_s2[i], g_sw2[j], values[i, j]]
    trace = [{"stage": "grid", "noise_var": 10.0 ** best[0], "prior_var": 10.0 ** best[1], "log_evidence": best[2]}]
    steps = (g_s2[1] - g_s2[0], g_sw2[1] - g_sw2[0])
    bounds = ((g_s2[0], g_s2[-1]), (g_sw2[0], g_sw2[-1]))
    for rnd in range(refine_rounds):
        for coord in (0, 1):
            lo = max(bounds[coord][0], best[coord] - steps[coord])
            hi = min(bounds[coord][1], best[coord] + steps[coord])
            if coord == 0:
                x, val = _golden_max(lambda a: objective(a, best[1]), lo, hi)
            else:
                x, val = _golden_max(lambda b: objective(best[0], b), lo, hi)
            if val > best[2]:
                best[coord], best[2] = x, val
        trace.append(
            {"stage": f"refine{rnd + 1}", "noise_var": 10.0 ** best[0], "prior_var": 10.0 ** best[1], "log_evidence": best[2]}
        )
    return EvidenceSearch(10.0 ** best[0], 10.0 ** best[1], float(best[2]), trace)


# -- stability --------------------------------------------------------------------

def kl_posterior_update(posterior, feature, y_true):
    """KL from the posterior to the posterior updated with ``(feature, y_true)``."""
    m = predictive(posterior, feature)
    s2, v = posterior.noise_var, m.epistemic_var
    r2 = (y_true - m.mean) ** 2
    # log p(y|D) - E_post[log p(y|W)]; the residual term enters with 1/s2 - 1/(s2+v)
    kl = 0.5 * (math.log(s2 / (s2 + v)) + (1.0 / s2 - 1.0 / (s2 + v)) * r2 + v / s2)
    return max(kl, 0.0)


def miscoverage_bound(kls, alpha):
    """``alpha + sqrt(1 - exp(-sum KL))``, clipped to ``[0, 1]``."""
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    kls = np.asarray(kls, dtype=float)
    if np.any(kls < 0):
        raise InvalidArgument("KL values must be non-negative")
    total = float(np.sum(kls))
    return float(min(1.0, max(0.0, alpha + math.sqrt(-math.expm1(-total)))))


def gaussian_kl(mean_p, cov_p, mean_q, cov_q):
    """KL(N(mean_p, cov_p) || N(mean_q, cov_q)) for full covariances."""
    dim = len(mean_p)
    lq = np.linalg.cholesky(cov_q)
    lp = np.linalg.cholesky(cov_p)
    a = np.linalg.solve(lq, lp)
    diff = np.linalg.solve(lq, mean_q - mean_p)
    logdet = 2 * (np.sum(np.log(np.diag(lq))) - np.sum(np.log(np.diag(lp))))
    return 0.5 * (np.sum(a**2) + diff @ diff - dim + logdet)


# -- per-exit fitting and serialization ------------------------------------------

def fit_exits(feature_set, targets, prior_means=None, tie=False, search_kwargs=None):
    """Empirical Bayes and posterior fit at every exit.

    Returns ``(posteriors, searches)``; with ``tie=True`` the same
    hyperparameters are shared by all exits.
    """
    search_kwargs = search_kwargs or {}
    mats = feature_set.per_exit if hasattr(feature_set, "per_exit") else list(feature_set)
    means = prior_means if prior_means is not None else [None] * len(mats)
    if tie:
        shared = empirical_bayes(list(mats), targets, list(means), **search_kwargs)
        searches = [shared] * len(mats)
    else:
        searches = [empirical_bayes(m, targets, mu, **search_kwargs) for m, mu in zip(mats, means)]
    posteriors = [
        fit_posterior(m, targets, s.noise_var, s.prior_var, mu) for m, mu, s in zip(mats, means, searches)
    ]
    return posteriors, searches


def save_posteriors(posteriors, path, searches=None):
    bundle = {"format_version": 1, "exits": {}}
    for t, post in enumerate(posteriors, start=1):
        entry = {
            "mean": post.mean.tolist(),
            "covariance": post.covariance.tolist(),
            "noise_var": post.noise_var,
            "prior_var": post.prior_var,
            "prior_mean": post.prior_mean.tolist(),
            "jitter": post.jitter,
        }
        if searches is not None:
            entry["search_trace"] = searches[t - 1].trace
        bundle["exits"][str(t)] = entry
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    return path


def load_posteriors(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"posterior bundle not found: {path}", path)
    bundle = json.loads(path.read_text())
    out = []
    for key in sorted(bundle["exits"], key=int):
        e = bundle["exits"][key]
        out.append(
            ExitPosterior(
                np.asarray(e["mean"]),
                np.asarray(e["covariance"]),
                e["noise_var"],
                e["prior_var"],
                np.asarray(e["prior_mean"]),
                e.get("jitter", 0.0),
            )
        )
    return out
