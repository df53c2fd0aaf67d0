"""Synthetic bilevel benchmarks with known solutions, plus group-lasso data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import (
    AnalyticSolution,
    IterateState,
    ProblemConstants,
    ProblemSpec,
    SolverConfig,
    StopRule,
    group_soft_threshold,
    project_box,
    soft_threshold,
    validate_config,
)

__all__ = [
    "Dataset",
    "ProblemBundle",
    "make_strong_convex_toy",
    "make_merely_convex",
    "make_sin_nonconvex",
    "make_lasso_toy",
    "make_group_lasso",
    "generate_group_lasso_data",
    "load_csv_dataset",
    "least_squares_fit",
    "BUILDERS",
    "build",
    "with_config",
]


@dataclass(frozen=True)
class Dataset:
    A_train: np.ndarray
    b_train: np.ndarray
    A_val: np.ndarray
    b_val: np.ndarray
    A_test: np.ndarray
    b_test: np.ndarray

    def __post_init__(self):
        m = self.A_train.shape[1]
        for name in ("train", "val", "test"):
            A, b = self.split(name)
            if A.ndim != 2 or A.shape[0] == 0:
                raise ValueError(f"{name} split is empty")
            if A.shape[1] != m:
                raise ValueError(f"{name} split has {A.shape[1]} features, expected {m}")
            if b.shape != (A.shape[0],):
                raise ValueError(f"{name} split has {b.shape[0]} targets for {A.shape[0]} rows")

    @property
    def m(self) -> int:
        return self.A_train.shape[1]

    def split(self, name: str):
        return getattr(self, f"A_{name}"), getattr(self, f"b_{name}")


@dataclass(frozen=True)
class ProblemBundle:
    """A benchmark instance with its constants, known solution and defaults."""

    name: str
    spec: ProblemSpec
    constants: ProblemConstants
    solution: Optional[AnalyticSolution]
    default_config: SolverConfig
    init: IterateState
    params: dict = field(default_factory=dict)
    summary: Optional[Callable] = None

    def __post_init__(self):
        validate_config(self.default_config, self.constants)


def make_strong_convex_toy(n: int = 1000) -> ProblemBundle:
    """``F = |x - e|^2/2 + |y|^2/2``, ``f = |y|^2/2 - x.y``; solution ``x = y = e/2``."""
    if n < 1:
        raise ValueError("n must be positive")
    e = np.ones(n)
    spec = ProblemSpec(
        n=n,
        m=n,
        eval_F=lambda x, y: 0.5 * float((x - e) @ (x - e)) + 0.5 * float(y @ y),
        grad_F=lambda x, y: (x - e, y.copy()),
        eval_f=lambda x, y: 0.5 * float(y @ y) - float(x @ y),
        grad_f=lambda x, y: (-y, y - x),
        name="strong_convex_toy",
    )
    consts = ProblemConstants(L_F=1.0, L_f=1.0, mu=1.0, rho_f2=0.0, rho_g2=0.0, L_g=0.0, F_lower=0.0)
    sol = AnalyticSolution(x_star=e / 2, y_star=e / 2, F_star=n / 4)
    cfg = SolverConfig(
        gamma=10.0, c_lower=33.3, p=0.49, alpha0=1.5, beta0=0.8, eta0=0.8,
        max_iters=50_000, stop_rule=StopRule("max_iters_only"), diag_every=100,
    )
    init = IterateState.start(np.zeros(n), np.zeros(n))
    return ProblemBundle("strong_convex_toy", spec, consts, sol, cfg, init, {"dim": n})


def make_merely_convex(n: int = 100) -> ProblemBundle:
    """LL depends on ``y1`` only, so ``y2`` is free at the lower level; solution ``(e, e, e)``."""
    if n < 1:
        raise ValueError("n must be positive")
    e = np.ones(n)

    def eval_F(x, y):
        y1, y2 = y[:n], y[n:]
        return 0.5 * float((x - y2) @ (x - y2)) + 0.5 * float((y1 - e) @ (y1 - e))

    def grad_F(x, y):
        y1, y2 = y[:n], y[n:]
        return x - y2, np.concatenate([y1 - e, y2 - x])

    def eval_f(x, y):
        y1 = y[:n]
        return 0.5 * float(y1 @ y1) - float(x @ y1)

    def grad_f(x, y):
        y1 = y[:n]
        return -y1, np.concatenate([y1 - x, np.zeros(n)])

    spec = ProblemSpec(n, 2 * n, eval_F, grad_F, eval_f, grad_f, name="merely_convex")
    golden = (1 + math.sqrt(5)) / 2
    consts = ProblemConstants(L_F=2.0, L_f=golden, rho_f2=0.0, rho_g2=0.0, L_g=0.0, F_lower=0.0)
    sol = AnalyticSolution(x_star=e.copy(), y_star=np.ones(2 * n), F_star=0.0)
    # 0.23 is a tuned annealing exponent: it keeps the iteration stable
    # as c_k grows while leaving enough step mass to converge
    cfg = SolverConfig(
        gamma=5.0, c_lower=0.167, p=0.49, alpha0=0.012, beta0=0.1, eta0=0.009,
        step_mode="inverse_power", q=0.23, max_iters=100_000,
        stop_rule=StopRule("rel_error_to_solution", 1e-3), diag_every=100,
    )
    init = IterateState.start(np.zeros(n), np.zeros(2 * n))
    return ProblemBundle("merely_convex", spec, consts, sol, cfg, init, {"dim": n})


def _nearest_C(a: float) -> float:
    # C_k = -pi/2 + 2 k pi closest to 2a
    k = round((2 * a + math.pi / 2) / (2 * math.pi))
    return -math.pi / 2 + 2 * k * math.pi


def make_sin_nonconvex(n: int = 1, a: float = 2.0, c_vec=None) -> ProblemBundle:
    """Scalar x, ``F = (x-a)^2 + |y - a e - c|^2``, LL ``sum_i sin(x + y_i - c_i)``."""
    if n < 1:
        raise ValueError("n must be positive")
    c = np.full(n, 2.0) if c_vec is None else np.asarray(c_vec, dtype=float).ravel()
    if c.size == 1 and n > 1:
        c = np.full(n, float(c[0]))
    if c.size != n:
        raise ValueError(f"c_vec must have {n} entries")
    shift = a + c

    def eval_F(x, y):
        return float((x[0] - a) ** 2 + (y - shift) @ (y - shift))

    def grad_F(x, y):
        return np.array([2 * (x[0] - a)]), 2 * (y - shift)

    def eval_f(x, y):
        return float(np.sin(x[0] + y - c).sum())

    def grad_f(x, y):
        cs = np.cos(x[0] + y - c)
        return np.array([cs.sum()]), cs

    spec = ProblemSpec(1, n, eval_F, grad_F, eval_f, grad_f, name="sin_nonconvex")
    C = _nearest_C(a)
    x_star = ((1 - n) * a + n * C) / (1 + n)
    y_star = C + c - x_star
    F_star = n * (C - 2 * a) ** 2 / (1 + n)
    consts = ProblemConstants(L_F=2.0, L_f=float(n + 1), rho_f2=1.0, rho_g2=0.0, L_g=0.0, F_lower=0.0)
    sol = AnalyticSolution(x_star=np.array([x_star]), y_star=y_star, F_star=F_star)
    stop = StopRule("direction_norm", 1e-8 if n == 1 else 1e-3)
    cfg = SolverConfig(
        gamma=200.0, c_lower=0.02, p=0.49, alpha0=5e-4, beta0=5e-4, eta0=0.001,
        max_iters=800, stop_rule=stop, diag_every=100,
    )
    init = IterateState.start([-6.0], np.zeros(n))
    return ProblemBundle("sin_nonconvex", spec, consts, sol, cfg, init, {"dim": n, "a": a, "c": c.tolist()})


def make_lasso_toy(n: int = 100) -> ProblemBundle:
    """``min sum(y)`` over ``x in [0,1]^n`` with a weighted-l1 lasso lower level."""
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and positive, got {n}")
    h = n // 2
    a = np.concatenate([np.full(h, 1 / n), np.full(h, -1 / n)])
    zeros, ones = np.zeros(n), np.ones(n)
    zeros.flags.writeable = ones.flags.writeable = False
    spec = ProblemSpec(
        n=n,
        m=n,
        eval_F=lambda x, y: float(y.sum()),
        grad_F=lambda x, y: (zeros, ones),
        eval_f=lambda x, y: 0.5 * float((y - a) @ (y - a)),
        grad_f=lambda x, y: (zeros, y - a),
        eval_g=lambda x, y: float(x @ np.abs(y)),
        grad_x_g=lambda x, y: np.abs(y),
        prox_g=lambda x, s, t: soft_threshold(t, s * x),
        proj_X=lambda x: project_box(x, 0.0, 1.0),
        name="lasso_toy",
    )
    consts = ProblemConstants(L_F=0.0, L_f=1.0, L_g=1.0, rho_f2=0.0, rho_g1=1.0, rho_g2=1.0)
    x_star = np.concatenate([np.full(h, 1 / n), np.zeros(h)])
    y_star = np.concatenate([np.zeros(h), np.full(h, -1 / n)])
    sol = AnalyticSolution(x_star=x_star, y_star=y_star, F_star=-0.5)
    # relative y error 0.08 keeps every coordinate within ~1e-3 of y*
    cfg = SolverConfig(
        gamma=10.0, c_lower=2.0, p=0.49, alpha0=0.1, beta0=1e-5, eta0=0.1,
        max_iters=2_000_000, stop_rule=StopRule("rel_error_y", 0.08),
        diag_every=10_000, trace_every=1000,
    )
    init = IterateState.start(np.zeros(n), np.zeros(n))
    return ProblemBundle("lasso_toy", spec, consts, sol, cfg, init, {"dim": n})


def least_squares_fit(A, b) -> np.ndarray:
    """Minimum-norm least-squares solution (the lower level at zero weights)."""
    return np.linalg.lstsq(A, b, rcond=None)[0]


def make_group_lasso(data: Dataset, J: int = 30) -> ProblemBundle:
    """Group-lasso hyperparameter selection with one weight per contiguous group.

    Losses are halved mean squared errors of each split. The solver starts at
    zero weights with y at the least-squares fit, i.e. on the lower-level
    solution set for the initial weights.
    """
    m = data.m
    if J < 1 or m % J:
        raise ValueError(f"cannot split {m} features into {J} equal groups")
    size = m // J
    groups = [np.arange(j * size, (j + 1) * size) for j in range(J)]
    At, bt = data.split("train")
    Av, bv = data.split("val")
    As, bs = data.split("test")
    Nt, Nv, Ns = len(bt), len(bv), len(bs)

    def loss(A, b, N, y):
        r = A @ y - b
        return 0.5 * float(r @ r) / N

    def group_norms(y):
        return np.linalg.norm(y.reshape(J, size), axis=1)

    def prox(x, s, t):
        return group_soft_threshold(t, groups, s * x)

    spec = ProblemSpec(
        n=J,
        m=m,
        eval_F=lambda x, y: loss(Av, bv, Nv, y),
        grad_F=lambda x, y: (np.zeros(J), Av.T @ (Av @ y - bv) / Nv),
        eval_f=lambda x, y: loss(At, bt, Nt, y),
        grad_f=lambda x, y: (np.zeros(J), At.T @ (At @ y - bt) / Nt),
        eval_g=lambda x, y: float(x @ group_norms(y)),
        grad_x_g=lambda x, y: group_norms(y),
        prox_g=prox,
        proj_X=lambda x: np.maximum(x, 0.0),
        name="group_lasso",
    )
    L_F = float(np.linalg.norm(Av, 2) ** 2 / Nv)
    L_f = float(np.linalg.norm(At, 2) ** 2 / Nt)
    consts = ProblemConstants(L_F=L_F, L_f=L_f, L_g=1.0, rho_f2=0.0, rho_g1=1.0, rho_g2=1.0, F_lower=0.0)
    cfg = SolverConfig(
        gamma=100.0, c_lower=20.0, p=0.48, alpha0=0.01, beta0=0.05, eta0=0.05,
        max_iters=5000, stop_rule=StopRule("rel_change_x", 0.2), diag_every=0,
    )
    y0 = least_squares_fit(At, bt)
    init = IterateState.start(np.zeros(J), y0)

    def summary(y):
        return {"test_error": loss(As, bs, Ns, y), "val_error": loss(Av, bv, Nv, y)}

    return ProblemBundle("group_lasso", spec, consts, None, cfg, init, {"dim": m, "groups": J}, summary)


def generate_group_lasso_data(n_each: int = 100, m: int = 600, seed: int = 0, snr: float = 2.0,
                              sigma: Optional[float] = None) -> Dataset:
    """Synthetic regression data with three blocks of 50 active features.

    ``b = A v + sigma * eps`` with standard-normal ``A`` and ``eps``. ``v`` has
    its first 50 entries set to one in each third of the coordinates. Unless
    given, ``sigma`` is chosen so that ``Var(A v) / Var(sigma eps) = snr**2``.
    """
    if m < 150:
        raise ValueError(f"m must be at least 150, got {m}")
    blocks = np.array_split(np.arange(m), 3)
    if min(len(b) for b in blocks) < 50:
        raise ValueError(f"m={m} leaves a block shorter than 50")
    v = np.zeros(m)
    for blk in blocks:
        v[blk[:50]] = 1.0
    if sigma is None:
        sigma = float(np.linalg.norm(v)) / snr
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(3):
        A = rng.standard_normal((n_each, m))
        b = A @ v + sigma * rng.standard_normal(n_each)
        parts += [A, b]
    return Dataset(*parts)


def _parse_csv(path) -> tuple:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: no data rows")

    def is_number(s):
        try:
            float(s)
            return True
        except ValueError:
            return False

    start = 0 if all(is_number(c) for c in rows[0]) else 1
    width = len(rows[0])
    data = []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ValueError(f"{path}: row {i} has {len(row)} columns, expected {width}")
        vals = []
        for j, cell in enumerate(row, start=1):
            try:
                vals.append(float(cell))
            except ValueError:
                raise ValueError(f"{path}: row {i}, column {j}: non-numeric value {cell!r}") from None
        data.append(vals)
    if not data:
        raise ValueError(f"{path}: header only, no data rows")
    if width < 2:
        raise ValueError(f"{path}: need at least one feature column and a target column")
    arr = np.array(data)
    return arr[:, :-1], arr[:, -1]


def load_csv_dataset(path_train, path_val, path_test) -> Dataset:
    """Read three comma-separated files; the last column is the target.

    A first row containing a non-numeric cell is treated as a header.
    """
    parts = []
    for p in (path_train, path_val, path_test):
        parts += list(_parse_csv(p))
    return Dataset(*parts)


def _group_lasso_from_dim(dim: int = 600, groups: Optional[int] = None, seed: int = 0) -> ProblemBundle:
    J = groups if groups is not None else (30 if dim == 600 else 300)
    return make_group_lasso(generate_group_lasso_data(100, dim, seed), J)


BUILDERS = {
    "strong_convex_toy": lambda dim=1000, **kw: make_strong_convex_toy(dim),
    "merely_convex": lambda dim=100, **kw: make_merely_convex(dim),
    "sin_nonconvex": lambda dim=1, **kw: make_sin_nonconvex(dim),
    "lasso_toy": lambda dim=100, **kw: make_lasso_toy(dim),
    "group_lasso": lambda dim=600, groups=None, seed=0, **kw: _group_lasso_from_dim(dim, groups, seed),
}


def build(name: str, dim: Optional[int] = None, **kw) -> ProblemBundle:
    if name not in BUILDERS:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(BUILDERS)}")
    if dim is not None:
        kw["dim"] = dim
    return BUILDERS[name](**kw)


def with_config(bundle: ProblemBundle, **overrides) -> ProblemBundle:
    return replace(bundle, default_config=replace(bundle.default_config, **overrides))
