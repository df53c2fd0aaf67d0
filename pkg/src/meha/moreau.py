"""Moreau envelope of the lower-level problem.

For ``gamma > 0`` the envelope is

    v(x, y) = min_{theta in Y} f(x, theta) + g(x, theta) + |theta - y|^2 / (2 gamma)

and, when the minimiser ``theta*`` is unique, its gradient is
``(grad_x f(x, theta*) + grad_x g(x, theta*), (y - theta*) / gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NumericalFailure, ProblemSpec

__all__ = [
    "MoreauEval",
    "theta_step",
    "solve_theta_star",
    "moreau_value",
    "moreau_gradient",
    "contraction_factor",
]


@dataclass(frozen=True)
class MoreauEval:
    theta_star: np.ndarray
    value: float
    grad_x: np.ndarray
    grad_y: np.ndarray
    inner_iters: int
    inner_residual: float
    converged: bool


def theta_step(prob: ProblemSpec, x, y, theta, eta: float, gamma: float, k=None):
    """One proximal-gradient step on the proximal lower-level problem."""
    _, gy = prob.grad_f(x, theta)
    out = prob.prox(x, eta, theta - eta * (gy + (theta - y) / gamma))
    if not np.isfinite(out).all():
        raise NumericalFailure("non-finite theta update", k)
    return out


def moreau_value(prob: ProblemSpec, x, y, theta_star, gamma: float) -> float:
    d = theta_star - y
    return prob.phi(x, theta_star) + float(d @ d) / (2 * gamma)


def moreau_gradient(prob: ProblemSpec, x, y, theta_star, gamma: float):
    gx, _ = prob.grad_f(x, theta_star)
    gx = np.asarray(gx, dtype=float) + prob.gx_g(x, theta_star)
    return gx, (y - theta_star) / gamma


def solve_theta_star(prob: ProblemSpec, x, y, eta: float, gamma: float, tol: float = 1e-10,
                     max_inner: int = 20000, theta0=None) -> MoreauEval:
    """Iterate :func:`theta_step` to (near) convergence.

    Stops once ``||theta+ - theta|| <= tol * max(1, ||theta||)``. Hitting
    ``max_inner`` first returns the last iterate with ``converged=False``.
    Only meant for diagnostics; the solver itself takes one step per iteration.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not eta > 0 or not gamma > 0:
        raise ValueError("eta and gamma must be positive")
    theta = np.array(y if theta0 is None else theta0, dtype=float)
    step = math.inf
    converged = False
    it = 0
    while it < max_inner:
        nxt = theta_step(prob, x, y, theta, eta, gamma)
        step = float(np.linalg.norm(nxt - theta))
        theta = nxt
        it += 1
        if step <= tol * max(1.0, float(np.linalg.norm(theta))):
            converged = True
            break
    gx, gy = moreau_gradient(prob, x, y, theta, gamma)
    return MoreauEval(
        theta_star=theta,
        value=moreau_value(prob, x, y, theta, gamma),
        grad_x=gx,
        grad_y=gy,
        inner_iters=it,
        inner_residual=step,
        converged=converged,
    )


def contraction_factor(eta: float, gamma: float, rho_f2: float = 0.0, rho_g2: float = 0.0) -> float:
    """Per-step contraction of the theta update towards theta*.

    ``sqrt(1 - eta (1/gamma - rho_f2)) / (1 - eta rho_g2)``.
    """
    a = eta * (1 / gamma - rho_f2)
    b = eta * rho_g2
    if not eta > 0 or not gamma > 0:
        raise ValueError("eta and gamma must be positive")
    if not a < 1:
        raise ValueError(f"need eta (1/gamma - rho_f2) < 1, got {a}")
    if not b < 1:
        raise ValueError(f"need eta rho_g2 < 1, got {b}")
    return math.sqrt(1 - a) / (1 - b)
