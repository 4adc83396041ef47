import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eenn_avcs import regression as reg
from eenn_avcs.bayes import ExitPosterior, fit_posterior, predictive, sample_weights
from eenn_avcs.errors import InvalidArgument, NumericalError
from eenn_avcs.regression import PredictionInterval, RatioCoefficients, SequenceState


def _post(mean, cov, noise_var=1.0):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return ExitPosterior(mean, np.atleast_2d(np.asarray(cov, dtype=float)), noise_var, 1.0, np.zeros_like(mean))


def _random_problem(rng, exits=3, dim=2):
    posts = []
    for _ in range(exits):
        phi = rng.standard_normal((dim + 3, dim))
        posts.append(fit_posterior(phi, rng.standard_normal(dim + 3), float(rng.uniform(0.1, 1.0)), 1.0))
    feats = [rng.standard_normal(dim) for _ in range(exits)]
    return posts, feats


class TestCoefficients:
    def test_no_change_when_sample_equals_mean_and_no_epistemic_variance(self):
        assert reg.coefficient_increments(0.7, 0.0, 1.3, 1.3) == (0.0, 0.0, 0.0)

    def test_worked_example(self):
        da, db, dc = reg.coefficient_increments(1.0, 1.0, 0.0, 1.0)
        np.testing.assert_allclose([da, db, dc], [0.25, -1.0, 0.5 * (1 + math.log(0.5))])
        np.testing.assert_allclose(dc, 0.15343, atol=1e-5)

    def test_update_uses_posterior_moments(self):
        post = _post([0.0], [[1.0]])
        state = reg.update_coefficients(SequenceState(alpha=0.05), post, np.array([1.0]), np.array([1.0]))
        co = state.coefficients
        np.testing.assert_allclose([co.a, co.b, co.c], [0.25, -1.0, 0.5 * (1 + math.log(0.5))])
        assert co.exit == 1

    @given(seed=st.integers(0, 2**16), exits=st.integers(1, 5))
    @settings(max_examples=40, deadline=None)
    def test_quadratic_matches_densities(self, seed, exits):
        rng = np.random.default_rng(seed)
        posts, feats = _random_problem(rng, exits)
        samples = [sample_weights(p, 1, rng) for p in posts]
        state = SequenceState(alpha=0.1)
        ys = rng.normal(0, 3, 7)
        direct = reg.log_ratio_direct(posts, feats, samples, ys)
        for t, (p, h, w) in enumerate(zip(posts, feats, samples)):
            state = reg.update_coefficients(state, p, h, w)
            np.testing.assert_allclose(state.coefficients(ys), direct[t], rtol=1e-9, atol=1e-9)
            assert state.coefficients.a >= -1e-12

    def test_leading_coefficient_ignores_samples(self, rng):
        posts, feats = _random_problem(rng, 2)
        a_vals = set()
        for _ in range(3):
            st_ = SequenceState(alpha=0.1)
            for p, h in zip(posts, feats):
                st_ = reg.update_coefficients(st_, p, h, sample_weights(p, 1, rng))
            a_vals.add(round(st_.coefficients.a, 14))
        assert len(a_vals) == 1

    def test_non_finite_names_exit(self):
        post = _post([0.0], [[1.0]])
        with pytest.raises(NumericalError, match="exit 1"):
            reg.update_coefficients(SequenceState(alpha=0.1), post, np.array([1.0]), np.array([np.inf]))


class TestSolve:
    def test_unit_quadratic(self):
        iv = reg.solve_interval(RatioCoefficients(1.0, 0.0, 0.0), math.exp(-1))
        np.testing.assert_allclose([iv.lower, iv.upper], [-1.0, 1.0])

    def test_tangent(self):
        # y^2 - 2y + 1 + c' with gamma~ = 1 exactly: root y = 1
        iv = reg.solve_interval(RatioCoefficients(1.0, -2.0, 1.0 - math.log(0.5)), 0.5)
        np.testing.assert_allclose([iv.lower, iv.upper], [1.0, 1.0])
        assert not iv.empty

    def test_negative_discriminant(self):
        assert reg.solve_interval(RatioCoefficients(1.0, 0.0, 1.0), 0.9).empty

    def test_linear_case(self):
        iv = reg.solve_interval(RatioCoefficients(0.0, 2.0, 0.0), math.exp(-1))
        assert iv.lower == -math.inf
        np.testing.assert_allclose(iv.upper, 0.5)

    def test_constant_case(self):
        assert reg.solve_interval(RatioCoefficients(), 0.05) == PredictionInterval.everything()
        assert reg.solve_interval(RatioCoefficients(c=5.0), 0.05).empty

    def test_bad_alpha(self):
        with pytest.raises(InvalidArgument):
            reg.solve_interval(RatioCoefficients(1, 0, 0), 1.0)

    @given(a=st.floats(1e-3, 10), b=st.floats(-50, 50), c=st.floats(-20, 20), alpha=st.floats(1e-3, 0.99))
    @settings(max_examples=100, deadline=None)
    def test_endpoints_hit_threshold(self, a, b, c, alpha):
        co = RatioCoefficients(a, b, c)
        iv = reg.solve_interval(co, alpha)
        if iv.empty:
            assert b * b - 4 * a * (c + math.log(alpha)) < 0
            return
        tol = 1e-6 * (1 + abs(math.log(alpha))) * (1 + abs(b) * max(abs(iv.lower), abs(iv.upper)))
        np.testing.assert_allclose(co([iv.lower, iv.upper]), math.log(1 / alpha), atol=tol)

    def test_threshold_monotone_in_alpha(self):
        co = RatioCoefficients(1.0, 0.3, -1.0)
        wide = reg.solve_interval(co, 0.05)
        narrow = reg.solve_interval(co, 0.5)
        assert wide.lower <= narrow.lower and narrow.upper <= wide.upper


class TestInterval:
    def test_intersect_disjoint(self):
        assert PredictionInterval(0, 1).intersect(PredictionInterval(2, 3)).empty

    def test_clip(self):
        iv = PredictionInterval(-5, 5).clip((0, 1))
        assert (iv.lower, iv.upper) == (0, 1)

    def test_serialization(self):
        for iv in (PredictionInterval(0.5, 2.0), PredictionInterval.nothing(), PredictionInterval.everything()):
            assert PredictionInterval.from_list(iv.to_list()).to_list() == iv.to_list()

    def test_empty_has_zero_length_and_contains_nothing(self):
        iv = PredictionInterval.nothing()
        assert iv.length == 0 and 0.0 not in iv


class TestSequence:
    def test_first_step_running_equals_raw(self, rng):
        posts, feats = _random_problem(rng, 1)
        st_ = reg.step(SequenceState(alpha=0.05), posts[0], feats[0], rng)
        assert st_.running_interval == st_.per_exit_raw[0]

    def test_disjoint_exits_collapse(self, rng):
        # exit 1 centred far below exit 2, both nearly certain
        p1 = _post([-100.0], [[1e-6]], noise_var=1e-2)
        p2 = _post([100.0], [[1e-6]], noise_var=1e-2)
        st_ = reg.run_sequence([p1, p2, p2], [np.array([1.0])] * 3, 0.05, rng)
        assert st_.collapsed_at == 2
        assert st_.running_interval.empty
        rec = st_.to_record(0, exits=3)
        assert rec["running"][1:] == [None, None]

    def test_collapsed_state_refuses_steps(self, rng):
        st_ = SequenceState(alpha=0.05, collapsed_at=1)
        with pytest.raises(InvalidArgument):
            reg.step(st_, _post([0.0], [[1.0]]), np.array([1.0]), rng)

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_running_width_nonincreasing(self, seed):
        rng = np.random.default_rng(seed)
        posts, feats = _random_problem(rng, 5)
        st_ = reg.run_sequence(posts, feats, 0.05, rng)
        widths = [iv.length for iv in st_.per_exit_running if not iv.empty]
        assert all(w2 <= w1 for w1, w2 in zip(widths, widths[1:]))
        for prev, cur in zip(st_.per_exit_running, st_.per_exit_running[1:]):
            if not cur.empty:
                assert prev.lower <= cur.lower and cur.upper <= prev.upper


class TestVariants:
    def test_parallel_one_matches_sequence(self, rng):
        posts, feats = _random_problem(rng, 4)
        par = reg.run_parallel(posts, feats, 1, 0.05, (7, 3))
        seq = reg.run_sequence(posts, feats, 0.05, reg.substream(7, 3, 0))
        assert par.per_exit_running == seq.per_exit_running

    def test_parallel_shrinks(self, rng):
        posts, feats = _random_problem(rng, 4)
        one = reg.run_parallel(posts, feats, 1, 0.05, (1, 0))
        ten = reg.run_parallel(posts, feats, 10, 0.05, (1, 0))
        for a, b in zip(one.per_exit_running, ten.per_exit_running):
            assert b.length <= a.length
            if not b.empty:
                assert a.lower <= b.lower and b.upper <= a.upper

    def test_parallel_members_are_nested(self, rng):
        posts, feats = _random_problem(rng, 4)
        par = reg.run_parallel(posts, feats, 5, 0.05, (2, 0))
        assert len(par.members) == 5
        for m in par.members:
            for prev, cur in zip(m.per_exit_running, m.per_exit_running[1:]):
                assert cur.empty or (prev.lower <= cur.lower and cur.upper <= prev.upper)

    def test_multisample_ones_matches_sequence(self, rng):
        posts, feats = _random_problem(rng, 3)
        ms = reg.run_multisample(posts, feats, [1, 1, 1], 0.05, (4, 2))
        seq = reg.run_sequence(posts, feats, 0.05, reg.substream(4, 2, 0))
        assert ms.per_exit_running == seq.per_exit_running

    def test_multisample_additivity(self, rng):
        posts, feats = _random_problem(rng, 1)
        samples = sample_weights(posts[0], 4, rng)
        together = reg.update_coefficients(SequenceState(alpha=0.1), posts[0], feats[0], samples).coefficients
        a = b = c = 0.0
        for w in samples:
            co = reg.update_coefficients(SequenceState(alpha=0.1), posts[0], feats[0], w).coefficients
            a, b, c = a + co.a, b + co.b, c + co.c
        np.testing.assert_allclose([together.a, together.b, together.c], [a, b, c], rtol=1e-12)

    def test_multisample_needs_counts(self, rng):
        posts, feats = _random_problem(rng, 3)
        with pytest.raises(InvalidArgument):
            reg.run_multisample(posts, feats, [1, 1], 0.05, 0)


class TestOracle:
    def test_agrees_with_closed_form(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            posts, feats = _random_problem(rng, 2, dim=1)
            samples = [sample_weights(p, 1, rng) for p in posts]
            state = SequenceState(alpha=0.1)
            for p, h, w in zip(posts, feats, samples):
                state = reg.update_coefficients(state, p, h, w)
            iv = reg.solve_interval(state.coefficients, 0.1)
            co = state.coefficients
            centre = -co.b / (2 * co.a)
            lo, hi = (centre - 5, centre + 5) if iv.empty else (iv.lower - 1, iv.upper + 1)
            grid = np.arange(lo, hi, 1e-3) + 3.7e-4
            mask = reg.grid_set_oracle(posts, feats, samples, 0.1, grid)[-1]
            if iv.empty:
                assert mask.sum() <= 1
            else:
                inside = grid[mask]
                assert abs(inside.min() - iv.lower) <= 1e-3 and abs(inside.max() - iv.upper) <= 1e-3

    def test_empty_grid_rejected(self):
        with pytest.raises(InvalidArgument):
            reg.grid_set_oracle([], [], [], 0.1, [])


class TestPoints:
    def test_thread_independent(self, small_wiggle):
        f, _ = small_wiggle["test"]
        posts = small_wiggle["posteriors"]
        a = reg.run_points(posts, f, 0.05, 3, parallel=3, threads=1)
        b = reg.run_points(posts, f, 0.05, 3, parallel=3, threads=3)
        assert [s.per_exit_running for s in a] == [s.per_exit_running for s in b]

    def test_record_seed(self, small_wiggle):
        f, _ = small_wiggle["test"]
        states = reg.run_points(small_wiggle["posteriors"], f, 0.05, 11, parallel=2)
        assert states[4].to_record(4)["seed"] == [11, 4]
