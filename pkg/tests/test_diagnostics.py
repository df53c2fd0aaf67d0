import dataclasses
import math

import numpy as np
import pytest

from meha.core import IterateState, ProblemSpec
from meha.diagnostics import (
    TraceRecord,
    feasibility_gap,
    finite_diff_check,
    fit_power_law,
    hypergradient_quadratic,
    merit_value,
    oracle_eval,
    rate_fit,
    stationarity_residual,
)
from meha.moreau import MoreauEval
from meha.problems import make_merely_convex, make_strong_convex_toy, with_config
from meha.solver import run


def quad_ll(n=3, F=None):
    """f = |y|^2/2 - x.y with an optional upper level."""
    F = F or (lambda x, y: 0.0, lambda x, y: (np.zeros(n), np.zeros(n)))
    return ProblemSpec(
        n=n, m=n, eval_F=F[0], grad_F=F[1],
        eval_f=lambda x, y: 0.5 * float(y @ y) - float(x @ y),
        grad_f=lambda x, y: (-y, y - x),
    )


def zero_problem(n=3):
    z = lambda x, y: (np.zeros(n), np.zeros(n))  # noqa: E731
    return ProblemSpec(n, n, lambda x, y: 0.0, z, lambda x, y: 0.0, z)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestStationarity:
    def test_toy_solution_residual_is_upper_gradient_over_c(self):
        n = 10
        b = make_strong_convex_toy(n)
        h = np.full(n, 0.5)
        for c in (1.0, 10.0, 1e4):
            r = stationarity_residual(b.spec, h, h, c, 10.0, oracle_tol=1e-12, eta=0.8)
            assert r == pytest.approx(math.sqrt(n) / c, rel=1e-8)

    def test_zero_at_penalized_stationary_point(self):
        n, gamma, c = 4, 10.0, 25.0
        b = make_strong_convex_toy(n)
        kappa = gamma / (1 + gamma)
        x = (1 / c + kappa) / (1 / c + 2 * kappa)
        r = stationarity_residual(b.spec, np.full(n, x), np.full(n, 1 - x), c, gamma, oracle_tol=1e-13, eta=0.8)
        assert r <= 1e-10

    def test_all_terms_vanish(self, rng):
        y = rng.normal(size=3)
        assert stationarity_residual(zero_problem(), rng.normal(size=3), y, 2.0, 1.0) == 0.0

    def test_step_insensitive_on_merely_convex(self, rng):
        b = make_merely_convex(5)
        x, y = rng.normal(size=5), rng.normal(size=10)
        ev = oracle_eval(b.spec, x, y, 5.0, 0.5, 1e-12)
        r1 = stationarity_residual(b.spec, x, y, 3.0, 5.0, ref_step=1.0, ev=ev)
        r2 = stationarity_residual(b.spec, x, y, 3.0, 5.0, ref_step=0.5, ev=ev)
        assert abs(r1 - r2) <= 0.1 * r1

    def test_bad_ref_step(self):
        with pytest.raises(ValueError):
            stationarity_residual(zero_problem(), np.zeros(3), np.zeros(3), 1.0, 1.0, ref_step=0.0)


class TestGapAndMerit:
    def test_gap_zero_when_lower_level_optimal(self, rng):
        x = rng.normal(size=3)
        assert feasibility_gap(quad_ll(), x, x.copy(), 2.0, eta=0.5) == pytest.approx(0.0, abs=1e-14)

    def test_gap_quadratic_closed_form(self, rng):
        prob, g = quad_ll(), 2.0
        x, y = rng.normal(size=3), rng.normal(size=3)
        t = (g * x + y) / (g + 1)
        v = 0.5 * t @ t - x @ t + (t - y) @ (t - y) / (2 * g)
        assert feasibility_gap(prob, x, y, g, oracle_tol=1e-13, eta=0.5) == pytest.approx(prob.phi(x, y) - v, rel=1e-9)

    def test_gap_nonnegative(self, rng):
        prob = quad_ll()
        for _ in range(30):
            assert feasibility_gap(prob, rng.normal(size=3), rng.normal(size=3), 1.0, eta=0.4) >= 0.0

    def test_inaccurate_oracle_raises(self):
        prob = quad_ll()
        x, y = np.zeros(3), np.ones(3)
        bad = MoreauEval(y, prob.phi(x, y) + 1.0, np.zeros(3), np.zeros(3), 1, 0.0, True)
        with pytest.raises(ArithmeticError):
            feasibility_gap(prob, x, y, 1.0, ev=bad)

    def test_merit_without_tracking_term(self, rng):
        b = make_strong_convex_toy(3)
        x, y = rng.normal(size=3), rng.normal(size=3)
        ev = oracle_eval(b.spec, x, y, 10.0, 0.8, 1e-13)
        st = IterateState(x, y, ev.theta_star.copy())
        V = merit_value(b.spec, st, 4.0, 10.0, consts=b.constants, ev=ev)
        expect = (b.spec.eval_F(x, y) - 0.0) / 4.0 + (b.spec.phi(x, y) - ev.value)
        assert V == pytest.approx(expect, rel=1e-12)

    def test_merit_zero_at_feasible_lower_bound(self, rng):
        x = rng.normal(size=3)
        st = IterateState(x, x.copy(), x.copy())
        V = merit_value(quad_ll(), st, 3.0, 2.0, C_V=5.0, F_lower=0.0, eta=0.5)
        assert V == pytest.approx(0.0, abs=1e-14)

    def test_merit_needs_lower_bound(self):
        x = np.zeros(3)
        with pytest.raises(ValueError):
            merit_value(quad_ll(), IterateState(x, x, x), 1.0, 1.0, C_V=1.0)

    def test_merely_convex_run_gap(self):
        b = make_merely_convex(100)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        gaps = [t.gap for t in r.trace if t.gap is not None]
        assert r.trace[-1].gap is not None and gaps[-1] <= 1e-4

    def test_gap_shrinks_with_horizon(self):
        b = with_config(make_strong_convex_toy(50), max_iters=4000, diag_every=500)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        gap = {t.k: t.gap for t in r.trace if t.gap is not None}
        for K in (500, 1000, 2000):
            assert gap[2 * K] <= gap[K]


class TestHypergradient:
    def test_toy(self):
        n = 5
        b = make_strong_convex_toy(n)
        I = np.eye(n)
        oracle = lambda x: x.copy()  # noqa: E731
        assert np.abs(hypergradient_quadratic(I, -I, b.spec, np.full(n, 0.5), oracle)).max() <= 1e-9
        x = np.linspace(-1, 2, n)
        np.testing.assert_allclose(hypergradient_quadratic(I, -I, b.spec, x, oracle), 2 * x - 1, atol=1e-14)

    def test_no_y_dependence(self, rng):
        n = 3
        F = (lambda x, y: float(x @ x), lambda x, y: (2 * x, np.zeros(n)))
        prob = quad_ll(n, F)
        x = rng.normal(size=n)
        Q = rng.normal(size=(n, n))
        out = hypergradient_quadratic(np.eye(n) * 2, Q, prob, x, lambda x: x / 2)
        np.testing.assert_array_equal(out, 2 * x)

    def test_singular(self):
        n = 2
        with pytest.raises(ValueError, match="singular"):
            hypergradient_quadratic(np.zeros((n, n)), np.eye(n), quad_ll(n), np.zeros(n), lambda x: x)


class TestFiniteDiff:
    def test_linear_exact(self, rng):
        a = rng.normal(size=4)
        err = finite_diff_check(lambda z: float(a @ z), lambda z: a, [rng.normal(size=4) for _ in range(5)], h=0.3)
        assert err <= 1e-12

    def test_quadratic(self, rng):
        M = rng.normal(size=(4, 4))
        Q = M @ M.T
        err = finite_diff_check(lambda z: 0.5 * z @ Q @ z, lambda z: Q @ z,
                                [rng.normal(size=4) for _ in range(5)], h=1e-5)
        assert err <= 1e-8

    def test_detects_wrong_gradient(self, rng):
        err = finite_diff_check(lambda z: float(z @ z), lambda z: z, [rng.normal(size=3)])
        assert err > 0.1


class TestRateFit:
    def _trace(self, vals, field="residual_surrogate"):
        return [TraceRecord(k=k, c_k=1.0, alpha_k=1.0, beta_k=1.0, F_val=0.0, **{field: v})
                for k, v in enumerate(vals, start=1)]

    def test_power_law(self):
        ks = np.arange(1, 400)
        assert rate_fit(self._trace(ks ** -0.5)) == pytest.approx(-0.5, abs=0.01)
        assert fit_power_law(ks, ks ** -0.5) == pytest.approx(-0.5, abs=0.01)

    def test_constant(self):
        assert rate_fit(self._trace(np.full(50, 3.0)), "residual_surrogate") == pytest.approx(0.0, abs=1e-12)

    def test_running_minimum_from_first_record(self):
        vals = np.r_[1e-3, np.ones(60)]
        assert rate_fit(self._trace(vals), window=(10, None)) == pytest.approx(0.0, abs=1e-12)

    def test_gap_field_and_skips(self):
        tr = self._trace(np.arange(1, 40) ** -1.0, "gap")
        tr.insert(3, dataclasses.replace(tr[3], gap=None))
        assert rate_fit(tr, "gap") == pytest.approx(-1.0, abs=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            rate_fit(self._trace(np.ones(5)))
        with pytest.raises(ValueError, match="nonpositive"):
            rate_fit(self._trace(np.r_[np.ones(20), 0.0]))
        with pytest.raises(ValueError):
            rate_fit(self._trace(np.ones(20)), field="merit")
