"""Self-contained oracle suites for the interval construction and its guarantees.

Each suite returns a :class:`SuiteResult` listing every check with the
measured quantity and the tolerance it was held to. Default sizes are meant
for a quick desk run; the acceptance tests call the same functions with the
full sample counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import regression as reg
from .bayes import (
    ExitPosterior,
    fit_posterior,
    gaussian_kl,
    kl_posterior_update,
    miscoverage_bound,
    predictive,
    sample_weights,
    update_posterior,
)


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"  [{status}] {self.name}: measured={self.measured:.6g} tolerance={self.tolerance:.6g}{extra}"


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def report(self):
        head = f"{'PASS' if self.passed else 'FAIL'} {self.name}"
        return "\n".join([head] + [c.line() for c in self.checks])


def random_posterior(rng, dim):
    a = rng.standard_normal((dim, dim))
    cov = a @ a.T * rng.uniform(0.05, 1.0) + 1e-3 * np.eye(dim)
    return ExitPosterior(rng.standard_normal(dim), cov, float(np.exp(rng.uniform(-3, 1))), 1.0, np.zeros(dim))


# -- grid oracle ----------------------------------------------------------------

def grid_oracle(n_problems=200, step=1e-3, alpha=None, seed=0):
    """Closed-form intervals against brute-force grid evaluation of log R."""
    rng = np.random.default_rng(seed)
    worst_cell, worst_end, failures = 0.0, 0.0, 0
    for _ in range(n_problems):
        dim = int(rng.integers(1, 4))
        exits = int(rng.integers(1, 5))
        a_sig = float(alpha) if alpha is not None else float(rng.uniform(0.01, 0.3))
        posts = [random_posterior(rng, dim) for _ in range(exits)]
        feats = [rng.standard_normal(dim) for _ in range(exits)]
        samples = [sample_weights(p, 1, rng) for p in posts]
        state = reg.SequenceState(alpha=a_sig)
        intervals = []
        for p, h, w in zip(posts, feats, samples):
            state = reg.update_coefficients(state, p, h, w)
            intervals.append((reg.solve_interval(state.coefficients, a_sig), state.coefficients))
        for t, (iv, co) in enumerate(intervals):
            if iv.empty:
                centre = -co.b / (2 * co.a)
                grid = np.arange(centre - 5.0, centre + 5.0, step)
            else:
                # random phase so grid points never sit exactly on an endpoint
                grid = np.arange(iv.lower - 1.0 + rng.uniform(0, step), iv.upper + 1.0 + step, step)
            inside = reg.grid_set_oracle(posts[: t + 1], feats[: t + 1], samples[: t + 1], a_sig, grid)[t]
            if iv.empty:
                if inside.any():
                    failures += 1
                    worst_cell = max(worst_cell, math.inf)
                continue
            if not inside.any():
                # interval narrower than one cell
                if iv.length > 2 * step:
                    failures += 1
                    worst_cell = math.inf
                continue
            lo_g, hi_g = grid[inside].min(), grid[inside].max()
            cell = max(abs(lo_g - iv.lower), abs(hi_g - iv.upper)) / step
            worst_cell = max(worst_cell, cell)
            if cell > 1.0 + 1e-9:
                failures += 1
            ends = reg.log_ratio_direct(posts[: t + 1], feats[: t + 1], samples[: t + 1], [iv.lower, iv.upper])[t]
            tol = 1e-6 * (1 + abs(math.log(a_sig)))
            err = float(np.max(np.abs(ends - math.log(1 / a_sig))))
            if err > tol:
                failures += 1
            worst_end = max(worst_end, err / tol)
    return SuiteResult(
        "grid_oracle",
        [
            Check("endpoint offset in grid cells", worst_cell, 1.0, worst_cell <= 1.0 + 1e-9, f"{n_problems} problems"),
            Check("endpoint log R error / tolerance", worst_end, 1.0, worst_end <= 1.0),
            Check("failed comparisons", failures, 0, failures == 0),
        ],
    )


# -- conjugacy ------------------------------------------------------------------

def conjugacy(n_problems=50, seed=0, rtol=1e-8):
    """Batch posterior vs sequential rank-one updates vs an explicit inverse."""
    rng = np.random.default_rng(seed)
    worst_seq, worst_inv = 0.0, 0.0
    for _ in range(n_problems):
        dim = int(rng.integers(1, 5))
        n = int(rng.integers(1, 30))
        s2, sw2 = float(np.exp(rng.uniform(-3, 1))), float(np.exp(rng.uniform(-2, 2)))
        phi = rng.standard_normal((n, dim))
        y = rng.standard_normal(n)
        m0 = rng.standard_normal(dim)
        post = fit_posterior(phi, y, s2, sw2, m0)
        seq = ExitPosterior(m0.copy(), sw2 * np.eye(dim), s2, sw2, m0)
        for h, yi in zip(phi, y):
            seq = update_posterior(seq, h, yi)
        prec = phi.T @ phi / s2 + np.eye(dim) / sw2
        cov = np.linalg.inv(prec)
        mean = cov @ (phi.T @ y / s2 + m0 / sw2)
        scale = 1 + np.abs(post.mean).max() + np.abs(post.covariance).max()
        worst_seq = max(worst_seq, (np.abs(seq.mean - post.mean).max() + np.abs(seq.covariance - post.covariance).max()) / scale)
        worst_inv = max(worst_inv, (np.abs(mean - post.mean).max() + np.abs(cov - post.covariance).max()) / scale)
    return SuiteResult(
        "conjugacy",
        [
            Check("sequential rank-one updates vs batch", worst_seq, rtol, worst_seq <= rtol),
            Check("explicit inverse vs batch", worst_inv, rtol, worst_inv <= rtol),
        ],
    )


def _conjugate_1d(rng, n_train=20, noise_var=0.5, prior_var=1.0):
    w_true = rng.normal(0, math.sqrt(prior_var))
    x = rng.standard_normal((n_train, 1))
    y = x[:, 0] * w_true + rng.normal(0, math.sqrt(noise_var), n_train)
    return fit_posterior(x, y, noise_var, prior_var), w_true


# -- martingale -----------------------------------------------------------------

def martingale(draws=20_000, seed=0, n_se=3.0):
    """One-step ratio has expectation 1 when weights come from the updated posterior."""
    rng = np.random.default_rng(seed)
    post, w_true = _conjugate_1d(rng)
    h = np.array([1.3])
    m = predictive(post, h)
    y_star = float(h @ [w_true] + rng.normal(0, math.sqrt(post.noise_var)))
    upd = update_posterior(post, h, y_star)
    w = sample_weights(upd, draws, rng)
    log_r = np.empty(draws)
    for i, wi in enumerate(w):
        da, db, dc = reg.coefficient_increments(post.noise_var, m.epistemic_var, m.mean, float(wi @ h))
        log_r[i] = da * y_star**2 + db * y_star + dc
    r = np.exp(log_r)
    mean, se = float(r.mean()), float(r.std(ddof=1) / math.sqrt(draws))
    return SuiteResult(
        "martingale",
        [
            Check("|mean ratio - 1| / MC standard error", abs(mean - 1.0) / se, n_se, abs(mean - 1.0) <= n_se * se,
                  f"mean={mean:.5f}, se={se:.2e}, v/s2={m.epistemic_var / post.noise_var:.3f}"),
        ],
    )


# -- Ville ----------------------------------------------------------------------

def ville(points=2000, exits=15, alpha=0.05, seed=0, n_se=2.0):
    """Crossing frequency of 1/alpha with exact updated posteriors."""
    rng = np.random.default_rng(seed)
    posts, truths = zip(*[_conjugate_1d(rng) for _ in range(exits)])
    crossed = 0
    thresh = math.log(1 / alpha)
    for _ in range(points):
        x = rng.standard_normal(1)
        # one label shared by all exits, drawn from the first exit's model
        y_star = float(x[0] * truths[0] + rng.normal(0, math.sqrt(posts[0].noise_var)))
        log_r = 0.0
        for post in posts:
            m = predictive(post, x)
            w = sample_weights(update_posterior(post, x, y_star), 1, rng)[0]
            da, db, dc = reg.coefficient_increments(post.noise_var, m.epistemic_var, m.mean, float(w @ x))
            log_r += da * y_star**2 + db * y_star + dc
            if log_r >= thresh:
                crossed += 1
                break
    freq = crossed / points
    se = math.sqrt(alpha * (1 - alpha) / points)
    return SuiteResult(
        "ville",
        [Check("sup-crossing frequency", freq, alpha + n_se * se, freq <= alpha + n_se * se, f"{points} points, {exits} exits")],
    )


# -- KL -------------------------------------------------------------------------

def kl(n_problems=200, seed=0, atol=1e-8):
    """Closed-form one-point KL against the general Gaussian KL."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_problems):
        dim = int(rng.integers(1, 5))
        post = random_posterior(rng, dim)
        h = rng.standard_normal(dim)
        y = float(rng.normal(h @ post.mean, 2.0))
        upd = update_posterior(post, h, y)
        ref = gaussian_kl(post.mean, post.covariance, upd.mean, upd.covariance)
        worst = max(worst, abs(kl_posterior_update(post, h, y) - ref) / max(1.0, abs(ref)))
    return SuiteResult("kl", [Check("closed form vs Gaussian KL", worst, atol, worst <= atol, f"{n_problems} problems")])


# -- bound ----------------------------------------------------------------------

def bound(points=2000, exits=5, alpha=0.05, seed=0, n_train=5, n_se=2.0):
    """Anytime miss rate of the realizable sequence against the KL bound."""
    rng = np.random.default_rng(seed)
    noise_var, prior_var = 0.5, 1.0
    w_true = rng.normal(0, 1.0)
    posts = []
    for _ in range(exits):
        x = rng.standard_normal((n_train, 1))
        y = x[:, 0] * w_true + rng.normal(0, math.sqrt(noise_var), n_train)
        posts.append(fit_posterior(x, y, noise_var, prior_var))
    misses, bounds = 0, []
    for _ in range(points):
        x = rng.standard_normal(1)
        y_star = float(x[0] * w_true + rng.normal(0, math.sqrt(noise_var)))
        feats = [x] * exits
        state = reg.run_sequence(posts, feats, alpha, rng)
        covered = all(y_star in iv for iv in state.per_exit_raw) and len(state.per_exit_raw) == exits
        misses += not covered
        bounds.append(miscoverage_bound([kl_posterior_update(p, x, y_star) for p in posts], alpha))
    rate = misses / points
    mean_bound = float(np.mean(bounds))
    se = math.sqrt(max(rate * (1 - rate), 1e-12) / points)
    return SuiteResult(
        "bound",
        [Check("anytime miss rate", rate, mean_bound + n_se * se, rate <= mean_bound + n_se * se,
               f"mean bound={mean_bound:.4f}")],
    )


SUITES = {
    "grid_oracle": grid_oracle,
    "conjugacy": conjugacy,
    "martingale": martingale,
    "ville": ville,
    "kl": kl,
    "bound": bound,
}


def run_suites(names=None, seed=0):
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    return [SUITES[n](seed=seed) for n in names]
