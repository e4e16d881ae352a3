"""Piecewise-linear approximators: exactness, certificates, normalization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import icuda.relu_approx as ra


class TestFit1d:
    def test_piecewise_linear_functions_are_exact(self):
        for f in (np.abs, lambda t: 2.0 * t + 1.0):
            rs, rep = ra.fit_1d(f, 1.0, 33)
            assert rep.sup_error <= 1e-11
            grid = np.linspace(-1.0, 1.0, 401)
            vals = ra.eval_batch(rs, grid[:, None])
            assert_allclose(vals, f(grid), atol=1e-11)

    def test_exponential_error_within_quadratic_budget(self):
        M = 65
        rs, rep = ra.fit_1d(lambda t: np.exp(-t), 1.0, M)
        # curvature bound: max |f''| / 8 times the squared knot spacing
        budget = (np.e / 8.0) * (2.0 / (M - 1)) ** 2
        grid = np.linspace(-1.0, 1.0, 5001)
        err = np.max(np.abs(ra.eval_batch(rs, grid[:, None]) - np.exp(-grid)))
        assert err <= budget
        # the certificate over-covers the measured error, but not wildly
        assert err <= rep.sup_error <= 2.0 * budget

    def test_terms_are_normalized(self):
        rs, _ = ra.fit_1d(lambda t: np.exp(-t), 1.0, 65)
        assert rs.max_norm <= 1.0 + 1e-12

    def test_evaluate_matches_call(self):
        rs, _ = ra.fit_1d(np.abs, 1.0, 9)
        for z in (-0.7, 0.0, 0.3):
            assert ra.evaluate(rs, [z]) == pytest.approx(rs([z]), abs=0)


class TestFitKnots:
    def test_interpolates_at_knots(self):
        knots = np.array([0.0, 0.1, 0.5, 1.0, 2.0])
        f = lambda t: np.exp(-t)
        rs, _ = ra.fit_knots(f, knots)
        for k in knots:
            assert ra.evaluate(rs, [k]) == pytest.approx(f(k), abs=1e-12)

    def test_flat_left_extrapolation(self):
        knots = np.linspace(1.0, 4.0, 7)
        rs, _ = ra.fit_knots(np.log, knots)
        left = ra.evaluate(rs, [-50.0])
        assert left == pytest.approx(np.log(1.0), abs=1e-9)

    def test_monotone_data_stays_monotone_on_line(self):
        knots = np.geomspace(1e-6, 10.0, 200)
        rs, _ = ra.fit_knots(np.log, knots)
        grid = np.linspace(-5.0, 20.0, 2000)
        vals = ra.eval_batch(rs, grid[:, None])
        assert np.all(np.diff(vals) >= -1e-9)

    def test_decreasing_function(self):
        knots = np.linspace(-1.0, 1.0, 50)
        rs, _ = ra.fit_knots(lambda t: np.exp(-3.0 * t), knots)
        grid = np.linspace(-2.0, 2.0, 500)
        vals = ra.eval_batch(rs, grid[:, None])
        assert np.all(np.diff(vals) <= 1e-9)


class TestIndicatorPair:
    def test_frozen_values(self):
        ip = ra.indicator_pair(10.0)
        assert ra.evaluate(ip, [0.05]) == pytest.approx(1.0, abs=1e-12)
        assert ra.evaluate(ip, [-0.05]) == pytest.approx(0.0, abs=1e-12)
        assert ra.evaluate(ip, [0.04]) == pytest.approx(0.9, abs=1e-12)
        assert ra.evaluate(ip, [5.0]) == pytest.approx(1.0, abs=1e-12)
        assert ra.evaluate(ip, [-5.0]) == pytest.approx(0.0, abs=1e-12)

    def test_rejects_nonpositive_sharpness(self):
        with pytest.raises(ValueError):
            ra.indicator_pair(0.0)


class TestMultivariate:
    def test_fit_nd_radial_function(self):
        f = lambda z: np.exp(-0.5 * (z[..., 0] ** 2 + z[..., 1] ** 2))
        rs, rep = ra.fit_nd(f, 2, 1.5, 400, seed=0)
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1.5, 1.5, size=(300, 2))
        vals = ra.eval_batch(rs, pts)
        ref = f(pts)
        assert np.max(np.abs(vals - ref)) <= max(3.0 * rep.sup_error, 0.05)

    def test_fit_binary_gated_slices(self):
        f = lambda t, v: (1.0 - v) * t + v * (2.0 * t + 1.0)
        rs, rep = ra.fit_binary_gated(f, -1.0, 1.0, 41)
        grid = np.linspace(-1.0, 1.0, 101)
        for v in (0.0, 1.0):
            pts = np.stack([grid, np.full_like(grid, v)], axis=1)
            vals = ra.eval_batch(rs, pts)
            assert_allclose(vals, f(grid, v), atol=1e-9 + rep.sup_error)

    def test_lift_embeds_direction(self):
        rs, _ = ra.fit_1d(np.abs, 1.0, 17)
        d = np.array([0.6, -0.8, 0.0])
        lifted = ra.lift(rs, d, 3)
        for z in (np.array([0.3, 0.1, 5.0]), np.array([-0.2, 0.4, -1.0])):
            assert ra.evaluate(lifted, z) == pytest.approx(
                ra.evaluate(rs, [d @ z]), abs=1e-12)

    def test_combine_sums_parts(self):
        r1, _ = ra.fit_1d(np.abs, 1.0, 9)
        r2 = ra.exact_terms([[1.0]], [0.0], [2.0], k=1)
        both = ra.combine([r1, r2], 1, radius=1.0)
        z = [0.4]
        assert ra.evaluate(both, z) == pytest.approx(
            ra.evaluate(r1, z) + ra.evaluate(r2, z), abs=1e-12)


class TestExactTerms:
    def test_direct_sum(self):
        rs = ra.exact_terms([[2.0], [-1.0]], [0.5, 0.0], [1.0, 3.0], k=1)
        z = 0.25
        expected = max(2.0 * z + 0.5, 0.0) + 3.0 * max(-z, 0.0)
        assert ra.evaluate(rs, [z]) == pytest.approx(expected, abs=1e-12)

    def test_constant_term(self):
        rs = ra.exact_terms([[0.0]], [1.0], [0.7], k=1)
        for z in (-3.0, 0.0, 11.0):
            assert ra.evaluate(rs, [z]) == pytest.approx(0.7, abs=0)


class TestSerialization:
    def test_json_round_trip(self):
        rs, _ = ra.fit_1d(lambda t: np.exp(-t), 1.0, 33)
        back = ra.from_json(ra.to_json(rs))
        grid = np.linspace(-1.0, 1.0, 101)
        assert_allclose(ra.eval_batch(back, grid[:, None]),
                        ra.eval_batch(rs, grid[:, None]), atol=0)
        assert back.radius == rs.radius

    def test_eval_batch_matches_loop(self):
        rs, _ = ra.fit_1d(np.abs, 1.0, 17)
        Z = np.linspace(-1.0, 1.0, 23)[:, None]
        batch = ra.eval_batch(rs, Z)
        loop = np.array([ra.evaluate(rs, z) for z in Z])
        assert_allclose(batch, loop, atol=1e-13)
