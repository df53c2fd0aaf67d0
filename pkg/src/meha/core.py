"""Problem description, solver configuration and the prox/projection toolkit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "NumericalFailure",
    "ProblemSpec",
    "ProblemConstants",
    "AnalyticSolution",
    "StopRule",
    "SolverConfig",
    "IterateState",
    "soft_threshold",
    "group_soft_threshold",
    "project_box",
    "prox_bruteforce_oracle",
    "validate_config",
]

Array = np.ndarray


class NumericalFailure(ArithmeticError):
    """Raised when an update produces non-finite values."""

    def __init__(self, message: str, k: Optional[int] = None):
        if k is not None:
            message = f"{message} (iteration {k})"
        super().__init__(message)
        self.k = k


def _identity(z):
    return z


@dataclass(frozen=True)
class ProblemSpec:
    """Callable description of a bilevel instance.

    The upper level minimises ``eval_F(x, y)`` over ``x`` in X and ``y`` in Y,
    subject to ``y`` minimising ``eval_f(x, .) + eval_g(x, .)`` over Y.

    ``prox_g(x, s, theta)`` must return the proximal point of
    ``s * (g(x, .) + indicator_Y)`` at ``theta``. Leaving all three ``g``
    callbacks unset declares a smooth lower level (``g == 0``); the prox then
    reduces to ``proj_Y``.
    """

    n: int
    m: int
    eval_F: Callable[[Array, Array], float]
    grad_F: Callable[[Array, Array], tuple]
    eval_f: Callable[[Array, Array], float]
    grad_f: Callable[[Array, Array], tuple]
    eval_g: Optional[Callable[[Array, Array], float]] = None
    grad_x_g: Optional[Callable[[Array, Array], Array]] = None
    prox_g: Optional[Callable[[Array, float, Array], Array]] = None
    proj_X: Callable[[Array], Array] = _identity
    proj_Y: Callable[[Array], Array] = _identity
    name: str = "problem"
    smooth_only: bool = field(init=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive, got n={self.n}, m={self.m}")
        given = [cb is not None for cb in (self.eval_g, self.grad_x_g, self.prox_g)]
        if any(given) and not all(given):
            raise ValueError("eval_g, grad_x_g and prox_g must be supplied together")
        object.__setattr__(self, "smooth_only", not any(given))

    def g(self, x: Array, y: Array) -> float:
        return 0.0 if self.smooth_only else float(self.eval_g(x, y))

    def gx_g(self, x: Array, y: Array) -> Array:
        if self.smooth_only:
            return np.zeros(self.n)
        return np.asarray(self.grad_x_g(x, y), dtype=float)

    def prox(self, x: Array, s: float, theta: Array) -> Array:
        """Prox of ``s * (g(x, .) + indicator_Y)``; projection when smooth."""
        if self.smooth_only:
            return self.proj_Y(theta)
        return self.prox_g(x, s, theta)

    def phi(self, x: Array, y: Array) -> float:
        """Lower-level objective f + g."""
        return float(self.eval_f(x, y)) + self.g(x, y)


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness and weak-convexity constants, each optional.

    ``F_lower`` is a lower bound of F on X x Y (needed by the merit function);
    ``None`` means it is unknown or F is unbounded below.
    """

    L_F: Optional[float] = None
    L_f: Optional[float] = None
    L_g: Optional[float] = None
    rho_f2: Optional[float] = None
    rho_g1: Optional[float] = None
    rho_g2: Optional[float] = None
    mu: Optional[float] = None
    F_lower: Optional[float] = None

    def __post_init__(self):
        for name in ("L_F", "L_f", "L_g", "rho_f2", "rho_g1", "rho_g2", "mu"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.F_lower is not None and not math.isfinite(self.F_lower):
            raise ValueError(f"F_lower must be finite, got {self.F_lower}")


@dataclass(frozen=True)
class AnalyticSolution:
    x_star: Optional[Array] = None
    y_star: Optional[Array] = None
    F_star: Optional[float] = None


STOP_KINDS = (
    "max_iters_only",
    "direction_norm",
    "rel_error_to_solution",
    "rel_error_y",
    "rel_change_x",
)


@dataclass(frozen=True)
class StopRule:
    """When to stop before ``max_iters``.

    ``direction_norm``: ||d_x|| <= tol.
    ``rel_error_to_solution``: ||x - x*|| / ||x*|| <= tol.
    ``rel_error_y``: ||y - y*|| / ||y*|| <= tol.
    ``rel_change_x``: ||x_k - x_{k-1}|| / ||x_k|| <= tol.
    """

    kind: str = "max_iters_only"
    tol: Optional[float] = None

    def __post_init__(self):
        if self.kind not in STOP_KINDS:
            raise ValueError(f"unknown stop rule {self.kind!r}; expected one of {STOP_KINDS}")
        if self.kind != "max_iters_only":
            if self.tol is None or not self.tol > 0:
                raise ValueError(f"stop rule {self.kind!r} needs a positive tol, got {self.tol}")


@dataclass(frozen=True)
class SolverConfig:
    """All tunables of a run.

    ``step_mode`` is ``"fixed"`` or ``"inverse_power"``; in the latter case the
    x and y step sizes are divided by ``(1 + k) ** q`` while ``eta0`` stays fixed.

    ``diag_every`` controls how often the expensive trace diagnostics (inner
    oracle, gap, residual, merit) are evaluated; 0 disables them.
    ``trace_every`` thins the trace to every n-th iteration (the initial and
    final rows are always kept). ``timing=False`` leaves ``elapsed`` empty so
    traces are byte-identical across reruns.
    """

    gamma: float
    c_lower: float
    p: float
    alpha0: float
    beta0: float
    eta0: float
    step_mode: str = "fixed"
    q: float = 0.5
    max_iters: int = 1000
    inner_oracle_tol: float = 1e-10
    max_inner: int = 20000
    seed: int = 0
    stop_rule: StopRule = StopRule()
    diag_every: int = 10
    trace_every: int = 1
    residual_step: float = 1.0
    merit_cv: Optional[float] = None
    timing: bool = True


@dataclass(frozen=True)
class IterateState:
    x: Array
    y: Array
    theta: Array
    k: int = 0

    @classmethod
    def start(cls, x, y, theta=None) -> "IterateState":
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        theta = y.copy() if theta is None else np.array(theta, dtype=float)
        return cls(x, y, theta, 0)


def soft_threshold(theta, tau) -> Array:
    """Componentwise ``sign(theta) * max(|theta| - tau, 0)``.

    ``tau`` may be a scalar or an array broadcastable to ``theta``.
    """
    theta = np.asarray(theta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if (tau < 0).any():
        raise ValueError("threshold must be nonnegative")
    return np.sign(theta) * np.maximum(np.abs(theta) - tau, 0.0)


def _check_partition(groups: Sequence, m: int) -> list:
    idx = [np.asarray(g, dtype=int).ravel() for g in groups]
    seen = np.zeros(m, dtype=int)
    for g in idx:
        if g.size and (g.min() < 0 or g.max() >= m):
            raise ValueError(f"group index out of range [0, {m})")
        np.add.at(seen, g, 1)
    if np.any(seen > 1):
        raise ValueError("groups overlap")
    if np.any(seen == 0):
        raise ValueError("groups do not cover every coordinate")
    return idx


def group_soft_threshold(theta, groups: Sequence, weights) -> Array:
    """Block shrinkage: prox of ``sum_j w_j ||theta[g_j]||_2``.

    ``groups`` is a partition of ``range(len(theta))`` given as index arrays
    (0-based). A block whose norm is at most its weight is set to zero.
    """
    theta = np.asarray(theta, dtype=float)
    weights = np.asarray(weights, dtype=float).ravel()
    idx = _check_partition(groups, theta.size)
    if weights.size != len(idx):
        raise ValueError(f"{len(idx)} groups but {weights.size} weights")
    if np.any(weights < 0):
        raise ValueError("group weights must be nonnegative")
    out = np.zeros_like(theta)
    for g, w in zip(idx, weights):
        block = theta[g]
        if block.size == 1:
            out[g] = np.sign(block) * max(abs(block[0]) - w, 0.0)
            continue
        scale = np.abs(block).max(initial=0.0)
        if scale == 0.0:
            continue
        # scaled norm avoids underflow for tiny blocks
        norm = scale * np.linalg.norm(block / scale)
        if norm > w:
            out[g] = block * ((norm - w) / norm)
    return out


def project_box(z, lo, hi) -> Array:
    """Clamp ``z`` into ``[lo, hi]`` componentwise; infinite bounds allowed."""
    z = np.asarray(z, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if (lo > hi).any():
        raise ValueError("box lower bound exceeds upper bound")
    return np.minimum(np.maximum(z, lo), hi)


def prox_bruteforce_oracle(phi_1d, s: float, theta_i: float, halfwidth: float = 3.0,
                           resolution: int = 200_000) -> float:
    """Grid argmin of ``s * phi_1d(u) + (u - theta_i)**2 / 2``.

    The grid spans ``theta_i +- halfwidth`` with ``resolution`` intervals, so
    the answer is accurate to ``2 * halfwidth / resolution``.
    """
    if not s > 0:
        raise ValueError("s must be positive")
    if not halfwidth > 0:
        raise ValueError("halfwidth must be positive")
    if resolution < 1000:
        raise ValueError("resolution must be at least 1000")
    u = np.linspace(theta_i - halfwidth, theta_i + halfwidth, resolution + 1)
    vals = np.asarray(phi_1d(u), dtype=float)
    if vals.shape != u.shape:
        vals = np.array([phi_1d(t) for t in u], dtype=float)
    obj = s * vals + 0.5 * (u - theta_i) ** 2
    return float(u[np.argmin(obj)])


def validate_config(cfg: SolverConfig, consts: Optional[ProblemConstants] = None) -> list:
    """Reject malformed configs; return warnings for violated theory bounds.

    The gamma and eta bounds from the convergence analysis only produce
    warnings: the bundled problem settings routinely exceed them.
    """
    if not 0 <= cfg.p < 0.5:
        raise ValueError(f"p must lie in [0, 0.5), got {cfg.p}")
    for name in ("alpha0", "beta0", "eta0", "gamma", "c_lower"):
        if not getattr(cfg, name) > 0:
            raise ValueError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.step_mode not in ("fixed", "inverse_power"):
        raise ValueError(f"unknown step_mode {cfg.step_mode!r}")
    if cfg.step_mode == "inverse_power" and not cfg.q > 0:
        raise ValueError(f"q must be positive, got {cfg.q}")
    if cfg.max_iters < 0:
        raise ValueError("max_iters must be nonnegative")
    if not cfg.inner_oracle_tol > 0:
        raise ValueError("inner_oracle_tol must be positive")

    warnings = []
    if consts is None:
        return warnings
    rf, rg = consts.rho_f2, consts.rho_g2
    if rf is not None or rg is not None:
        rho = 2 * (rf or 0.0) + 2 * (rg or 0.0)
        if rho > 0 and cfg.gamma >= 1 / rho:
            warnings.append(
                f"gamma={cfg.gamma} >= 1/(2 rho_f2 + 2 rho_g2) = {1 / rho:.6g}; "
                "the proximal lower-level problem may not have a unique solution"
            )
    if rf is not None and consts.L_f is not None:
        bound = (1 / cfg.gamma - rf) / (consts.L_f + 1 / cfg.gamma) ** 2
        if cfg.eta0 > bound:
            warnings.append(f"eta0={cfg.eta0} exceeds (1/gamma - rho_f2)/(L_f + 1/gamma)^2 = {bound:.6g}")
    if rg is not None and rg > 0 and cfg.eta0 >= 1 / rg:
        warnings.append(f"eta0={cfg.eta0} >= 1/rho_g2 = {1 / rg:.6g}")
    return warnings
