"""The single-loop MEHA iteration, its schedules and the run driver."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    AnalyticSolution,
    IterateState,
    NumericalFailure,
    ProblemConstants,
    ProblemSpec,
    SolverConfig,
    validate_config,
)
from .diagnostics import (
    TraceRecord,
    default_merit_weight,
    oracle_eval,
    stationarity_residual,
)
from .moreau import theta_step

__all__ = [
    "Schedule",
    "RunResult",
    "penalty_at",
    "stepsize_at",
    "direction_x",
    "direction_y",
    "meha_step",
    "run",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    c_lower: float
    p: float
    alpha0: float
    beta0: float
    eta0: float
    step_mode: str = "fixed"
    q: float = 0.5

    @classmethod
    def from_config(cls, cfg: SolverConfig) -> "Schedule":
        return cls(cfg.c_lower, cfg.p, cfg.alpha0, cfg.beta0, cfg.eta0, cfg.step_mode, cfg.q)


def penalty_at(sched: Schedule, k: int) -> float:
    """Penalty ``c_k = c_lower * (k + 1) ** p``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return sched.c_lower * (k + 1) ** sched.p


def stepsize_at(sched: Schedule, k: int):
    """``(alpha_k, beta_k, eta_k)``; only alpha and beta are ever annealed."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if sched.step_mode == "inverse_power":
        d = (1 + k) ** sched.q
        return sched.alpha0 / d, sched.beta0 / d, sched.eta0
    return sched.alpha0, sched.beta0, sched.eta0


def _finite(v, what, k):
    if not np.isfinite(v).all():
        raise NumericalFailure(f"non-finite {what}", k)
    return v


def direction_x(prob: ProblemSpec, state: IterateState, theta_next, c_k: float) -> np.ndarray:
    x, y = state.x, state.y
    Fx, _ = prob.grad_F(x, y)
    fx, _ = prob.grad_f(x, y)
    fx_t, _ = prob.grad_f(x, theta_next)
    d = np.asarray(Fx) / c_k + (np.asarray(fx) - np.asarray(fx_t))
    if not prob.smooth_only:
        d = d + (prob.gx_g(x, y) - prob.gx_g(x, theta_next))
    return _finite(d, "x direction", state.k)


def direction_y(prob: ProblemSpec, x_next, y, theta_next, c_k: float, gamma: float, k=None) -> np.ndarray:
    _, Fy = prob.grad_F(x_next, y)
    _, fy = prob.grad_f(x_next, y)
    d = np.asarray(Fy) / c_k + np.asarray(fy) - (y - theta_next) / gamma
    return _finite(d, "y direction", k)


def _step(prob, state, sched, gamma, k):
    c_k = penalty_at(sched, k)
    alpha, beta, eta = stepsize_at(sched, k)
    theta = theta_step(prob, state.x, state.y, state.theta, eta, gamma, k)
    dx = direction_x(prob, state, theta, c_k)
    x = _finite(prob.proj_X(state.x - alpha * dx), "x update", k)
    dy = direction_y(prob, x, state.y, theta, c_k, gamma, k)
    y = _finite(prob.prox(x, beta, state.y - beta * dy), "y update", k)
    return IterateState(x, y, theta, state.k + 1), dx


def meha_step(prob: ProblemSpec, state: IterateState, cfg: SolverConfig, k: Optional[int] = None) -> IterateState:
    """One iteration: theta, then x (using the new theta), then y (using the new x)."""
    k = state.k if k is None else k
    return _step(prob, state, Schedule.from_config(cfg), cfg.gamma, k)[0]


@dataclass
class RunResult:
    final: IterateState
    trace: list
    stop_reason: str
    wall_time: float
    iterations: int
    message: str = ""


def _rel_err(z, ref):
    if ref is None:
        return None
    return float(np.linalg.norm(z - ref) / max(np.linalg.norm(ref), 1e-300))


class _Recorder:
    def __init__(self, prob, cfg, sched, solution, consts):
        self.prob, self.cfg, self.sched = prob, cfg, sched
        self.sol = solution or AnalyticSolution()
        self.consts = consts
        self.trace = []
        self.t0 = time.perf_counter()
        cv = cfg.merit_cv
        if cv is None:
            try:
                cv = default_merit_weight(consts, cfg.gamma)
            except ValueError:
                cv = None
        self.C_V = cv
        self.F_lower = consts.F_lower if consts is not None else None

    def record(self, state: IterateState, with_diag: bool):
        prob, cfg, k = self.prob, self.cfg, state.k
        c_k = penalty_at(self.sched, k)
        alpha, beta, _ = stepsize_at(self.sched, k)
        F_val = float(prob.eval_F(state.x, state.y))
        gap = resid = merit = track = None
        if with_diag:
            ev = oracle_eval(prob, state.x, state.y, cfg.gamma, cfg.eta0, cfg.inner_oracle_tol,
                             cfg.max_inner, theta0=state.theta)
            gap = prob.phi(state.x, state.y) - ev.value
            resid = stationarity_residual(prob, state.x, state.y, c_k, cfg.gamma, cfg.residual_step, ev=ev)
            d = state.theta - ev.theta_star
            track = float(np.linalg.norm(d))
            if self.C_V is not None and self.F_lower is not None:
                merit = (F_val - self.F_lower) / c_k + gap + self.C_V * float(d @ d)
        self.trace.append(
            TraceRecord(
                k=k,
                c_k=c_k,
                alpha_k=alpha,
                beta_k=beta,
                F_val=F_val,
                gap=gap,
                residual_surrogate=resid,
                merit=merit,
                err_x_rel=_rel_err(state.x, self.sol.x_star),
                err_y_rel=_rel_err(state.y, self.sol.y_star),
                theta_inner_residual=track,
                elapsed=time.perf_counter() - self.t0 if cfg.timing else None,
            )
        )


def _stop_met(rule, prev: IterateState, cur: IterateState, dx, sol: AnalyticSolution) -> bool:
    kind = rule.kind
    if kind == "max_iters_only":
        return False
    if kind == "direction_norm":
        return float(np.linalg.norm(dx)) <= rule.tol
    if kind == "rel_error_to_solution":
        return _rel_err(cur.x, sol.x_star) <= rule.tol
    if kind == "rel_error_y":
        return _rel_err(cur.y, sol.y_star) <= rule.tol
    # rel_change_x
    nx = float(np.linalg.norm(cur.x))
    return nx > 0 and float(np.linalg.norm(cur.x - prev.x)) <= rule.tol * nx


def run(prob: ProblemSpec, cfg: SolverConfig, init: IterateState, solution: Optional[AnalyticSolution] = None,
        constants: Optional[ProblemConstants] = None) -> RunResult:
    """Iterate MEHA from ``init`` until the stop rule fires or ``max_iters``.

    A row is recorded for the initial state and after each iteration (thinned
    by ``cfg.trace_every``; the final state is always recorded). A non-finite
    update ends the run with ``stop_reason='numerical_failure'`` and the
    partial trace.
    """
    for w in validate_config(cfg, constants):
        log.warning(w)
    if init.x.shape != (prob.n,) or init.y.shape != (prob.m,) or init.theta.shape != (prob.m,):
        raise ValueError(
            f"initial state shapes {init.x.shape}, {init.y.shape}, {init.theta.shape} "
            f"do not match n={prob.n}, m={prob.m}"
        )
    sol = solution or AnalyticSolution()
    rule = cfg.stop_rule
    if rule.kind == "rel_error_to_solution" and sol.x_star is None:
        raise ValueError("rel_error_to_solution needs an analytic x*")
    if rule.kind == "rel_error_y" and sol.y_star is None:
        raise ValueError("rel_error_y needs an analytic y*")

    sched = Schedule.from_config(cfg)
    rec = _Recorder(prob, cfg, sched, sol, constants)
    de, te = cfg.diag_every, max(cfg.trace_every, 1)
    state = IterateState(init.x, init.y, init.theta, 0)
    t0 = time.perf_counter()

    # non-finite values are detected explicitly, so numpy's overflow chatter is muted
    with np.errstate(over="ignore", invalid="ignore"):
        reason, message, state = _loop(prob, cfg, sched, rule, sol, rec, state, de, te)
    return RunResult(state, rec.trace, reason, time.perf_counter() - t0, state.k, message)


def _loop(prob, cfg, sched, rule, sol, rec, state, de, te):
    reason, message = "max_iters", ""
    try:
        rec.record(state, de > 0)
        for k in range(cfg.max_iters):
            prev = state
            state, dx = _step(prob, prev, sched, cfg.gamma, k)
            done = _stop_met(rule, prev, state, dx, sol)
            last = done or state.k == cfg.max_iters
            if last or state.k % te == 0:
                rec.record(state, de > 0 and (last or state.k % de == 0))
            if done:
                reason = "tol_met"
                break
    except NumericalFailure as exc:
        reason, message = "numerical_failure", str(exc)
        log.error("run stopped: %s", exc)
    return reason, message, state
