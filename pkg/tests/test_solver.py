import dataclasses

import mpmath
import numpy as np
import pytest

from meha.core import IterateState, ProblemSpec, StopRule
from meha.problems import make_lasso_toy, make_merely_convex, make_strong_convex_toy, with_config
from meha.solver import (
    Schedule,
    direction_x,
    direction_y,
    meha_step,
    penalty_at,
    run,
    stepsize_at,
)


def sched(**kw):
    base = dict(c_lower=2.0, p=0.49, alpha0=1.0, beta0=0.5, eta0=0.1)
    base.update(kw)
    return Schedule(**base)


def toy_stationary_point(c, gamma):
    """Closed-form stationary point of the penalized toy (per coordinate)."""
    kappa = gamma / (1 + gamma)
    x = (1 / c + kappa) / (1 / c + 2 * kappa)
    return x, 1 - x, (gamma * x + (1 - x)) / (gamma + 1)


class TestSchedules:
    def test_penalty_initial(self):
        assert penalty_at(sched(), 0) == 2.0

    def test_penalty_constant(self):
        assert penalty_at(sched(p=0.0), 1000) == 2.0

    def test_penalty_reference(self):
        with mpmath.workdps(40):
            ref = float(2 * mpmath.power(100, mpmath.mpf("0.49")))
        assert penalty_at(sched(), 99) == pytest.approx(ref, rel=1e-15)
        assert penalty_at(sched(), 99) == pytest.approx(19.09985, abs=1e-5)

    def test_penalty_monotone(self):
        s = sched()
        c = [penalty_at(s, k) for k in range(500)]
        assert all(b >= a for a, b in zip(c, c[1:]))

    def test_fixed_steps(self):
        assert stepsize_at(sched(), 12345) == (1.0, 0.5, 0.1)

    def test_inverse_power(self):
        a, b, e = stepsize_at(sched(step_mode="inverse_power", q=0.5), 3)
        assert (a, b, e) == (0.5, 0.25, 0.1)

    def test_inverse_power_at_zero(self):
        assert stepsize_at(sched(step_mode="inverse_power", q=0.9), 0) == (1.0, 0.5, 0.1)

    def test_negative_k(self):
        with pytest.raises(ValueError):
            penalty_at(sched(), -1)


class TestDirections:
    def test_dx_at_inner_optimum(self):
        b = make_strong_convex_toy(5)
        x = np.linspace(0, 1, 5)
        st = IterateState(x, x.copy(), x.copy())
        Fx, _ = b.spec.grad_F(x, x)
        np.testing.assert_allclose(direction_x(b.spec, st, x.copy(), 4.0), Fx / 4.0, atol=1e-15)

    def test_dx_large_penalty_limit(self):
        b = make_strong_convex_toy(3)
        x, y, t = np.array([0.1, 0.2, 0.3]), np.array([1.0, 0.0, -1.0]), np.array([0.5, 0.5, 0.5])
        d = direction_x(b.spec, IterateState(x, y, t), t, 1e15)
        np.testing.assert_allclose(d, t - y, atol=1e-12)

    def test_merely_convex_solution(self):
        n = 4
        b = make_merely_convex(n)
        e = np.ones(n)
        st = IterateState(e, np.ones(2 * n), np.ones(2 * n))
        assert not direction_x(b.spec, st, np.ones(2 * n), 3.0).any()
        assert not direction_y(b.spec, e, np.ones(2 * n), np.ones(2 * n), 3.0, 5.0).any()

    def test_dy_quadratic(self):
        b = make_strong_convex_toy(3)
        x, y = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.5, 0.0])
        _, Fy = b.spec.grad_F(x, y)
        d = direction_y(b.spec, x, y, y.copy(), 7.0, 2.0)
        np.testing.assert_allclose(d, Fy / 7.0 + y - x, atol=1e-15)


class TestStep:
    def test_fixed_point_at_penalized_stationary_point(self):
        n, gamma = 4, 10.0
        b = make_strong_convex_toy(n)
        cfg = dataclasses.replace(b.default_config, gamma=gamma)
        k = 37
        c = penalty_at(Schedule.from_config(cfg), k)
        x, y, t = toy_stationary_point(c, gamma)
        st = IterateState(np.full(n, x), np.full(n, y), np.full(n, t), k)
        nxt = meha_step(b.spec, st, cfg)
        for a, z in ((nxt.x, st.x), (nxt.y, st.y), (nxt.theta, st.theta)):
            np.testing.assert_allclose(a, z, atol=1e-12)
        assert nxt.k == k + 1

    def test_matches_hand_rolled_update(self):
        n = 6
        b = make_strong_convex_toy(n)
        cfg = b.default_config
        rng = np.random.default_rng(3)
        x, y, th = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
        k = 5
        c = cfg.c_lower * (k + 1) ** cfg.p
        a, be, eta, g = cfg.alpha0, cfg.beta0, cfg.eta0, cfg.gamma
        # f = |y|^2/2 - x.y, F = |x-e|^2/2 + |y|^2/2, written out by hand
        th1 = th - eta * ((th - x) + (th - y) / g)
        dx = (x - 1) / c + (-y) - (-th1)
        x1 = x - a * dx
        dy = y / c + (y - x1) - (y - th1) / g
        y1 = y - be * dy
        out = meha_step(b.spec, IterateState(x, y, th, k), cfg)
        np.testing.assert_allclose(out.theta, th1, rtol=0, atol=1e-14)
        np.testing.assert_allclose(out.x, x1, rtol=0, atol=1e-14)
        np.testing.assert_allclose(out.y, y1, rtol=0, atol=1e-14)

    def test_first_step_from_zero(self):
        n = 3
        b = make_strong_convex_toy(n)
        cfg = b.default_config
        out = meha_step(b.spec, b.init, cfg)
        np.testing.assert_allclose(out.x, cfg.alpha0 / cfg.c_lower * np.ones(n), atol=1e-15)

    def test_smooth_path_equals_zero_g_path(self):
        n = 5
        b = make_strong_convex_toy(n)
        s = b.spec
        zero_g = ProblemSpec(
            n, n, s.eval_F, s.grad_F, s.eval_f, s.grad_f,
            eval_g=lambda x, y: 0.0, grad_x_g=lambda x, y: np.zeros(n), prox_g=lambda x, st, t: t.copy(),
        )
        rng = np.random.default_rng(0)
        st = IterateState(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n), 2)
        a, c = meha_step(s, st, b.default_config), meha_step(zero_g, st, b.default_config)
        for u, v in ((a.x, c.x), (a.y, c.y), (a.theta, c.theta)):
            assert np.array_equal(u, v)

    def test_update_order(self):
        """theta uses (x_k, y_k); x uses theta_{k+1}; y uses x_{k+1}."""
        n = 2
        b = make_strong_convex_toy(n)
        calls = []

        def grad_f(x, y):
            calls.append(("f", x.copy(), y.copy()))
            return b.spec.grad_f(x, y)

        def grad_F(x, y):
            calls.append(("F", x.copy(), y.copy()))
            return b.spec.grad_F(x, y)

        spec = dataclasses.replace(b.spec, grad_f=grad_f, grad_F=grad_F)
        x0, y0, t0 = np.array([0.1, 0.2]), np.array([0.3, 0.4]), np.array([0.5, 0.6])
        out = meha_step(spec, IterateState(x0, y0, t0), b.default_config)
        seq = [(tag, tuple(x), tuple(y)) for tag, x, y in calls]
        th1, x1 = tuple(out.theta), tuple(out.x)
        expect = [
            ("f", tuple(x0), tuple(t0)),  # theta step
            ("F", tuple(x0), tuple(y0)),  # direction_x
            ("f", tuple(x0), tuple(y0)),
            ("f", tuple(x0), th1),
            ("F", x1, tuple(y0)),  # direction_y at the new x
            ("f", x1, tuple(y0)),
        ]
        assert seq == expect


class TestRun:
    def test_zero_iterations(self):
        b = with_config(make_strong_convex_toy(4), max_iters=0)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        assert r.stop_reason == "max_iters" and r.iterations == 0
        assert len(r.trace) == 1 and r.trace[0].k == 0
        assert np.array_equal(r.final.x, b.init.x)

    def test_trace_shape_and_penalty(self):
        b = with_config(make_strong_convex_toy(4), max_iters=60, diag_every=7, trace_every=3)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        ks = [t.k for t in r.trace]
        assert len(ks) <= 61 and ks == sorted(set(ks)) and ks[0] == 0 and ks[-1] == 60
        cs = [t.c_k for t in r.trace]
        assert all(b2 >= a for a, b2 in zip(cs, cs[1:]))
        assert r.trace[-1].gap is not None

    def test_deterministic(self):
        b = with_config(make_lasso_toy(10), max_iters=300, diag_every=50, timing=False,
                        stop_rule=StopRule("max_iters_only"))
        r1 = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        r2 = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        assert r1.trace == r2.trace

    def test_iterates_stay_feasible(self):
        b = make_lasso_toy(10)
        cfg = dataclasses.replace(b.default_config, alpha0=5.0)
        st = b.init
        for _ in range(200):
            st = meha_step(b.spec, st, cfg)
            assert np.array_equal(b.spec.proj_X(st.x), st.x)
            assert np.array_equal(b.spec.proj_Y(st.y), st.y)

    def test_numerical_failure_keeps_partial_trace(self):
        b = with_config(make_strong_convex_toy(3), alpha0=100.0, max_iters=5000, diag_every=0)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        assert r.stop_reason == "numerical_failure"
        assert 0 < r.iterations < 5000 and "non-finite" in r.message
        assert len(r.trace) == r.iterations + 1

    def test_stop_rule_fires(self):
        b = with_config(make_strong_convex_toy(4), stop_rule=StopRule("rel_error_to_solution", 1e-2), diag_every=0)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        assert r.stop_reason == "tol_met" and r.trace[-1].err_x_rel <= 1e-2

    def test_shape_mismatch(self):
        b = make_strong_convex_toy(4)
        with pytest.raises(ValueError, match="shapes"):
            run(b.spec, b.default_config, IterateState.start(np.zeros(3), np.zeros(4)))

    def test_solution_required_for_error_rule(self):
        b = make_strong_convex_toy(4)
        cfg = dataclasses.replace(b.default_config, stop_rule=StopRule("rel_error_to_solution", 1e-3))
        with pytest.raises(ValueError):
            run(b.spec, cfg, b.init)

    def test_merely_convex_short_run_improves(self):
        b = with_config(make_merely_convex(10), max_iters=300, diag_every=0)
        r = run(b.spec, b.default_config, b.init, b.solution, b.constants)
        assert r.trace[-1].err_x_rel < r.trace[0].err_x_rel
