"""Stationarity, gap, merit and hypergradient instrumentation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import IterateState, ProblemConstants, ProblemSpec
from .moreau import MoreauEval, solve_theta_star

__all__ = [
    "TraceRecord",
    "DiagnosticsReport",
    "oracle_eval",
    "stationarity_residual",
    "merit_value",
    "default_merit_weight",
    "feasibility_gap",
    "hypergradient_quadratic",
    "finite_diff_check",
    "fit_power_law",
    "rate_fit",
]

GAP_SLACK = 1e-9


@dataclass(frozen=True)
class TraceRecord:
    """One row of a run trace.

    ``gap``, ``residual_surrogate``, ``merit`` and ``theta_inner_residual``
    need the inner oracle and are ``None`` on rows where it was skipped.
    ``theta_inner_residual`` is the tracking error ``||theta_k - theta*||``.
    """

    k: int
    c_k: float
    alpha_k: float
    beta_k: float
    F_val: float
    gap: Optional[float] = None
    residual_surrogate: Optional[float] = None
    merit: Optional[float] = None
    err_x_rel: Optional[float] = None
    err_y_rel: Optional[float] = None
    theta_inner_residual: Optional[float] = None
    elapsed: Optional[float] = None


@dataclass
class DiagnosticsReport:
    max_grad_fd_error: float = 0.0
    prox_oracle_max_error: float = 0.0
    contraction_violations: int = 0
    max_contraction_ratio: float = 0.0
    contraction_bound: float = 0.0
    max_stationarity_violation: float = 0.0
    fitted_rate_exponent: Optional[float] = None


def oracle_eval(prob, x, y, gamma, eta, tol, max_inner=20000, theta0=None) -> MoreauEval:
    """Inner oracle that never reports an envelope value above phi(x, y).

    A warm start from ``theta0`` can land in a worse stationary point than
    ``theta = y`` when the lower level is nonconvex; in that case the solve is
    repeated from ``y``.
    """
    ev = solve_theta_star(prob, x, y, eta, gamma, tol, max_inner, theta0)
    if theta0 is not None and ev.value > prob.phi(x, y):
        ev = solve_theta_star(prob, x, y, eta, gamma, tol, max_inner, None)
    if not ev.converged:
        warnings.warn(
            f"inner oracle stopped after {ev.inner_iters} steps with residual {ev.inner_residual:.3g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return ev


def _penalized_grads(prob, x, y, c_k, gamma, ev):
    Fx, Fy = prob.grad_F(x, y)
    fx, fy = prob.grad_f(x, y)
    Gx = np.asarray(Fx) / c_k + np.asarray(fx) + prob.gx_g(x, y) - ev.grad_x
    Gy = np.asarray(Fy) / c_k + np.asarray(fy) - ev.grad_y
    return Gx, Gy


def stationarity_residual(prob: ProblemSpec, x, y, c_k: float, gamma: float, ref_step: float = 1.0,
                          oracle_tol: float = 1e-10, eta: float = 0.1, max_inner: int = 20000,
                          ev: Optional[MoreauEval] = None) -> float:
    """Prox-gradient-mapping norm of the penalized problem ``psi_c / c``.

    Returns ``||(x - P_X(x - s G_x)) / s|| + ||(y - prox_{s g}(y - s G_y)) / s||``
    where ``G`` is the gradient of the smooth part of ``psi_c / c`` with the
    envelope gradient taken at the inner-oracle solution. It is zero exactly at
    stationary points. Pass ``ev`` to reuse an oracle result.
    """
    if not ref_step > 0:
        raise ValueError("ref_step must be positive")
    if ev is None:
        ev = oracle_eval(prob, x, y, gamma, eta, oracle_tol, max_inner)
    Gx, Gy = _penalized_grads(prob, x, y, c_k, gamma, ev)
    s = ref_step
    rx = (x - prob.proj_X(x - s * Gx)) / s
    ry = (y - prob.prox(x, s, y - s * Gy)) / s
    return float(np.linalg.norm(rx) + np.linalg.norm(ry))


def feasibility_gap(prob: ProblemSpec, x, y, gamma: float, oracle_tol: float = 1e-10, eta: float = 0.1,
                    max_inner: int = 20000, ev: Optional[MoreauEval] = None) -> float:
    """``phi(x, y) - v_gamma(x, y)``, clipped at zero.

    Values below ``-1e-9`` indicate an inaccurate oracle and raise.
    """
    if ev is None:
        ev = oracle_eval(prob, x, y, gamma, eta, oracle_tol, max_inner)
    gap = prob.phi(x, y) - ev.value
    if gap < -GAP_SLACK * max(1.0, abs(ev.value)):
        raise ArithmeticError(f"envelope exceeds lower-level objective by {-gap:.3g}")
    return max(gap, 0.0)


def default_merit_weight(consts: Optional[ProblemConstants], gamma: float) -> float:
    if consts is None or consts.L_f is None:
        raise ValueError("merit weight needs L_f (or an explicit C_V)")
    return (consts.L_f + (consts.L_g or 0.0)) ** 2 + 1 / gamma**2


def merit_value(prob: ProblemSpec, state: IterateState, c_k: float, gamma: float, C_V: Optional[float] = None,
                F_lower: Optional[float] = None, oracle_tol: float = 1e-10, eta: float = 0.1,
                consts: Optional[ProblemConstants] = None, max_inner: int = 20000,
                ev: Optional[MoreauEval] = None) -> float:
    """``(F - F_lower)/c_k + (phi - v_gamma) + C_V ||theta - theta*||^2``."""
    if C_V is None:
        C_V = default_merit_weight(consts, gamma)
    if F_lower is None:
        if consts is None or consts.F_lower is None:
            raise ValueError("merit needs a lower bound F_lower")
        F_lower = consts.F_lower
    x, y = state.x, state.y
    if ev is None:
        ev = oracle_eval(prob, x, y, gamma, eta, oracle_tol, max_inner, theta0=state.theta)
    d = state.theta - ev.theta_star
    gap = prob.phi(x, y) - ev.value
    return (float(prob.eval_F(x, y)) - F_lower) / c_k + gap + C_V * float(d @ d)


def hypergradient_quadratic(Q_yy, Q_xy, prob: ProblemSpec, x, oracle: Callable) -> np.ndarray:
    """Implicit hypergradient for a lower level with constant Hessian blocks.

    ``Q_yy`` is the m x m Hessian of f in y and ``Q_xy`` the n x m mixed
    block; ``oracle(x)`` returns the exact lower-level solution.
    """
    Q_yy = np.atleast_2d(np.asarray(Q_yy, dtype=float))
    Q_xy = np.atleast_2d(np.asarray(Q_xy, dtype=float))
    if np.linalg.cond(Q_yy) > 1 / np.finfo(float).eps:
        raise ValueError("Q_yy is singular")
    y_star = oracle(x)
    Fx, Fy = prob.grad_F(x, y_star)
    return np.asarray(Fx, dtype=float) - Q_xy @ np.linalg.solve(Q_yy, np.asarray(Fy, dtype=float))


def _central_diff(fn, z, h):
    out = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        out[i] = (fn(z + e) - fn(z - e)) / (2 * h)
    return out


def finite_diff_check(fn: Callable, grad: Callable, points: Iterable, h: float = 1e-6) -> float:
    """Worst relative error between ``grad`` and central differences of ``fn``."""
    if not h > 0:
        raise ValueError("h must be positive")
    worst = 0.0
    for z in points:
        z = np.asarray(z, dtype=float)
        fd = _central_diff(fn, z, h)
        g = np.asarray(grad(z), dtype=float)
        scale = max(np.linalg.norm(fd), np.linalg.norm(g), 1e-8)
        worst = max(worst, float(np.linalg.norm(g - fd) / scale))
    return worst


def fit_power_law(ks: Sequence, values: Sequence) -> float:
    """Least-squares slope of log(running minimum) against log(k)."""
    ks = np.asarray(ks, dtype=float)
    values = np.asarray(values, dtype=float)
    if ks.size < 10:
        raise ValueError("need at least 10 points to fit a rate")
    if np.any(values <= 0) or np.any(ks <= 0):
        raise ValueError("rate fit needs positive k and values")
    running = np.minimum.accumulate(values)
    slope, _ = np.polyfit(np.log(ks), np.log(running), 1)
    return float(slope)


def rate_fit(trace: Sequence[TraceRecord], field: str = "residual_surrogate", window=(1, None)) -> float:
    """Fit the decay exponent of the running minimum of a trace column.

    The running minimum starts at the first record (not the window start);
    rows without a value are skipped. ``window`` is an inclusive k range.
    """
    if field not in ("residual_surrogate", "gap"):
        raise ValueError(f"cannot fit a rate to {field!r}")
    rows = [(r.k, getattr(r, field)) for r in trace if getattr(r, field) is not None]
    if not rows:
        raise ValueError(f"trace has no {field} values")
    ks = np.array([k for k, _ in rows], dtype=float)
    vals = np.array([v for _, v in rows], dtype=float)
    if np.any(vals <= 0):
        bad = ks[vals <= 0][0]
        raise ValueError(f"nonpositive {field} at k={int(bad)}")
    running = np.minimum.accumulate(vals)
    lo, hi = window
    hi = np.inf if hi is None else hi
    sel = (ks >= lo) & (ks <= hi)
    if sel.sum() < 10:
        raise ValueError("window must contain at least 10 records")
    slope, _ = np.polyfit(np.log(ks[sel]), np.log(running[sel]), 1)
    return float(slope)
