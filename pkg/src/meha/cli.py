"""Command-line entry point: ``run``, ``sweep`` and ``check``.

Configs are flat JSON objects. Any key omitted falls back to the chosen
problem's default settings. A ``manifest.json`` written by ``run`` is also
accepted as a config, which reproduces the original run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import (
    NumericalFailure,
    ProblemSpec,
    SolverConfig,
    StopRule,
    group_soft_threshold,
    prox_bruteforce_oracle,
    soft_threshold,
    validate_config,
)
from .diagnostics import DiagnosticsReport, TraceRecord, finite_diff_check, hypergradient_quadratic
from .moreau import contraction_factor, moreau_gradient, solve_theta_star, theta_step
from .problems import BUILDERS, ProblemBundle, build, make_lasso_toy, make_merely_convex
from .solver import RunResult, run

log = logging.getLogger("meha")

EXIT_OK, EXIT_ERROR, EXIT_NUMERICAL = 0, 1, 2

TRACE_HEADER = [
    "k", "c_k", "alpha_k", "beta_k", "F_val", "gap", "residual", "merit",
    "err_x_rel", "err_y_rel", "theta_inner_residual", "elapsed_s",
]
_TRACE_FIELDS = [f.name for f in dataclasses.fields(TraceRecord)]

# key -> accepted python types; None in the tuple allows JSON null
_SELECTOR_KEYS = {"problem": (str,), "dim": (int,), "groups": (int,), "seed": (int,)}
_CONFIG_KEYS = {
    "gamma": (float,), "c_lower": (float,), "p": (float,), "alpha0": (float,), "beta0": (float,),
    "eta0": (float,), "step_mode": (str,), "q": (float,), "max_iters": (int,), "tol": (float, None),
    "stop_rule": (str,), "inner_oracle_tol": (float,), "max_inner": (int,), "diag_every": (int,),
    "trace_every": (int,), "residual_step": (float,), "merit_cv": (float, None), "timing": (bool,),
}
CONFIG_KEYS = {**_SELECTOR_KEYS, **_CONFIG_KEYS}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclasses.dataclass(frozen=True)
class ProblemSelector:
    problem: str
    dim: Optional[int] = None
    groups: Optional[int] = None
    seed: int = 0

    def build(self) -> ProblemBundle:
        kw = {"dim": self.dim}
        if self.problem == "group_lasso":
            kw.update(groups=self.groups, seed=self.seed)
        elif self.groups is not None:
            raise ConfigError(f"'groups' only applies to group_lasso, not {self.problem}")
        return build(self.problem, **kw)


def _check_type(key, value):
    allowed = CONFIG_KEYS[key]
    if value is None:
        if None in allowed:
            return value
        raise ConfigError(f"{key}: null is not allowed")
    if isinstance(value, bool):
        if bool in allowed:
            return value
        raise ConfigError(f"{key}: expected {allowed[0].__name__}, got bool")
    if int in allowed and isinstance(value, int):
        return value
    if float in allowed and isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return float(value)
    if str in allowed and isinstance(value, str):
        return value
    raise ConfigError(f"{key}: expected {allowed[0].__name__}, got {type(value).__name__}")


def load_document(path) -> dict:
    """Read a config (or manifest) file into a flat dict, unvalidated."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not text.strip():
        raise ConfigError(f"config {path} is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if "config" in doc and isinstance(doc["config"], dict):
        doc = doc["config"]
    return doc


def config_from_dict(raw: dict):
    """Validate a flat dict and merge it into the problem defaults.

    Returns ``(selector, bundle, config)``; ``config.stop_rule`` carries the
    resolved stop rule.
    """
    for key in raw:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
    vals = {k: _check_type(k, v) for k, v in raw.items()}
    if "problem" not in vals:
        raise ConfigError("missing key 'problem'")
    if vals["problem"] not in BUILDERS:
        raise ConfigError(f"problem: unknown problem {vals['problem']!r}; choose from {sorted(BUILDERS)}")
    sel = ProblemSelector(vals["problem"], vals.get("dim"), vals.get("groups"), vals.get("seed", 0))
    try:
        bundle = sel.build()
    except ValueError as exc:
        raise ConfigError(f"dim: {exc}") from exc

    base = bundle.default_config
    rule = base.stop_rule
    kind = vals.pop("stop_rule", rule.kind)
    has_tol = "tol" in vals
    tol = vals.pop("tol", None)
    if not has_tol:
        tol = rule.tol if kind == rule.kind else None
    if kind == "max_iters_only":
        tol = None
    try:
        stop = StopRule(kind, tol)
    except ValueError as exc:
        raise ConfigError(f"stop_rule: {exc}") from exc
    overrides = {k: v for k, v in vals.items() if k in _CONFIG_KEYS}
    overrides["seed"] = sel.seed
    # the command line defaults to timing-free traces so reruns are bytewise equal
    overrides.setdefault("timing", False)
    cfg = dataclasses.replace(base, stop_rule=stop, **overrides)
    try:
        validate_config(cfg, None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return sel, dataclasses.replace(bundle, default_config=cfg), cfg


def parse_config(path):
    """Parse a config file into ``(selector, SolverConfig, StopRule)``."""
    raw = load_document(path)
    for k, v in raw.items():
        if isinstance(v, list):
            raise ConfigError(f"{k}: lists are only allowed in sweep configs")
    sel, _, cfg = config_from_dict(raw)
    return sel, cfg, cfg.stop_rule


def flatten_config(sel: ProblemSelector, cfg: SolverConfig) -> dict:
    """Inverse of :func:`config_from_dict`: every key, explicit."""
    out = {"problem": sel.problem, "dim": sel.dim, "seed": sel.seed}
    if sel.problem == "group_lasso":
        out["groups"] = sel.groups
    out = {k: v for k, v in out.items() if v is not None}
    for key in _CONFIG_KEYS:
        if key == "stop_rule":
            out[key] = cfg.stop_rule.kind
        elif key == "tol":
            out[key] = cfg.stop_rule.tol
        else:
            out[key] = getattr(cfg, key)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_trace_csv(trace: Sequence[TraceRecord], path) -> None:
    """Write a trace with a fixed header; ``None`` becomes an empty cell."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for rec in trace:
                w.writerow([_fmt(getattr(rec, f)) for f in _TRACE_FIELDS])
    except OSError as exc:
        raise OSError(f"cannot write trace {path}: {exc}") from exc


def read_trace_csv(path) -> list:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRACE_HEADER:
        raise ValueError(f"{path}: unexpected trace header")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(TRACE_HEADER):
            raise ValueError(f"{path}:{line}: expected {len(TRACE_HEADER)} cells, got {len(row)}")
        vals = {}
        for name, cell in zip(_TRACE_FIELDS, row):
            if name == "k":
                vals[name] = int(cell)
            else:
                vals[name] = float(cell) if cell != "" else None
        out.append(TraceRecord(**vals))
    return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _final_metrics(bundle: ProblemBundle, res: RunResult) -> dict:
    last = res.trace[-1] if res.trace else None
    out = {
        "err_x_rel": last.err_x_rel if last else None,
        "err_y_rel": last.err_y_rel if last else None,
        "F_val": last.F_val if last else None,
        "gap": last.gap if last else None,
        "residual_surrogate": last.residual_surrogate if last else None,
    }
    if bundle.summary is not None and np.all(np.isfinite(res.final.y)):
        out.update(bundle.summary(res.final.y))
    return {k: _jsonable(v) for k, v in out.items()}


def execute(raw: dict, out_dir) -> dict:
    """Run one flat config and write ``trace.csv`` and ``manifest.json``."""
    sel, bundle, cfg = config_from_dict(raw)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    res = run(bundle.spec, cfg, bundle.init, bundle.solution, bundle.constants)
    write_trace_csv(res.trace, out_dir / "trace.csv")
    manifest = {
        "problem": bundle.name,
        "params": {k: _jsonable(v) for k, v in bundle.params.items()},
        "config": {**flatten_config(sel, cfg),
                   **{k: bundle.params[k] for k in ("dim", "groups") if k in bundle.params}},
        "seed": cfg.seed,
        "version": __version__,
        "started": started,
        "stop_reason": res.stop_reason,
        "message": res.message,
        "iterations": res.iterations,
        "final": _final_metrics(bundle, res),
        "wall_time": res.wall_time,
    }
    if bundle.name == "group_lasso":
        manifest["note"] = ("stop rule rel_change_x <= 0.2 is loose by design; "
                            "the test suite additionally compares test error with least squares")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def _exit_for(reason: str) -> int:
    return EXIT_NUMERICAL if reason == "numerical_failure" else EXIT_OK


def cmd_run(config_path, out_dir) -> int:
    try:
        raw = load_document(config_path)
        for k, v in raw.items():
            if isinstance(v, list):
                raise ConfigError(f"{k}: lists are only allowed in sweep configs")
        man = execute(raw, out_dir)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{man['problem']}: {man['stop_reason']} after {man['iterations']} iterations "
          f"({man['wall_time']:.2f} s); output in {out_dir}")
    return _exit_for(man["stop_reason"])


def expand_sweep(raw: dict) -> tuple:
    """Cross product of list-valued keys. Returns ``(swept_keys, [flat dicts])``."""
    axes = [k for k, v in raw.items() if isinstance(v, list)]
    for k in axes:
        if not raw[k]:
            raise ConfigError(f"{k}: sweep list is empty")
    combos = []
    for values in itertools.product(*(raw[k] for k in axes)):
        flat = dict(raw)
        flat.update(zip(axes, values))
        combos.append(flat)
    return axes, combos


def _sweep_child(args):
    flat, out_dir = args
    t0 = time.perf_counter()
    try:
        man = execute(flat, out_dir)
        return {"stop_reason": man["stop_reason"], "iterations": man["iterations"],
                "wall_time": man["wall_time"], "exit_code": _exit_for(man["stop_reason"]), "error": ""}
    except Exception as exc:  # recorded in the summary, never fatal to siblings
        return {"stop_reason": "error", "iterations": "", "wall_time": time.perf_counter() - t0,
                "exit_code": EXIT_ERROR, "error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(config_path, out_dir, jobs: int = 1) -> int:
    if jobs < 1:
        print("error: --jobs must be a positive integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        raw = load_document(config_path)
        axes, combos = expand_sweep(raw)
        for flat in combos:
            config_from_dict(flat)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    tasks = [(flat, out_dir / f"run_{i:03d}") for i, flat in enumerate(combos)]
    if jobs == 1 or len(tasks) == 1:
        results = [_sweep_child(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_child, tasks))

    cols = ["run", *axes, "stop_reason", "iterations", "wall_time", "exit_code", "error"]
    with (out_dir / "sweep_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for (flat, sub), r in zip(tasks, results):
            w.writerow([sub.name, *(flat[k] for k in axes), r["stop_reason"], r["iterations"],
                        _fmt(r["wall_time"]), r["exit_code"], r["error"]])
    failed = [r for r in results if r["exit_code"] != EXIT_OK]
    print(f"sweep: {len(results)} runs, {len(failed)} failed; summary in {out_dir / 'sweep_summary.csv'}")
    return max((r["exit_code"] for r in results), default=EXIT_OK)


# --- verification battery -------------------------------------------------

CHECK_FD_TOL = 1e-5
CHECK_STAT_TOL = 1e-8


def _check_prox(rng) -> float:
    """Worst prox error measured in grid spacings."""
    halfwidth, res = 3.0, 200_000
    spacing = 2 * halfwidth / res
    worst = 0.0
    for _ in range(100):
        t, s, w = rng.normal(0, 1.5), rng.uniform(0.1, 2.0), rng.uniform(0, 1.5)
        ref = prox_bruteforce_oracle(lambda u: w * np.abs(u), s, t, halfwidth, res)
        got = float(soft_threshold(t, s * w))
        worst = max(worst, abs(got - ref) / spacing)
    for _ in range(100):
        # the prox of a block norm acts radially, so compare along the ray
        block = rng.normal(0, 1.0, size=int(rng.integers(1, 6)))
        s, w = rng.uniform(0.1, 2.0), rng.uniform(0, 2.0)
        r = float(np.linalg.norm(block))
        ref = prox_bruteforce_oracle(lambda u: w * np.abs(u), s, r, halfwidth, res)
        got = group_soft_threshold(block, [np.arange(block.size)], [s * w])
        err = float(np.linalg.norm(got - ref * block / r))
        worst = max(worst, err / spacing)
    return worst


def _check_moreau(rng) -> float:
    worst = 0.0
    cases = [(make_merely_convex(4), 5.0), (make_lasso_toy(6), 10.0)]
    for bundle, gamma in cases:
        prob = bundle.spec
        eta = 1.0 / (1.0 + 1.0 / gamma)

        def value(x, y):
            ev = solve_theta_star(prob, x, y, eta, gamma, tol=1e-12, max_inner=100_000)
            return ev.value

        def grads(x, y):
            ev = solve_theta_star(prob, x, y, eta, gamma, tol=1e-12, max_inner=100_000)
            return moreau_gradient(prob, x, y, ev.theta_star, gamma)

        n = prob.n
        for _ in range(10):
            x = prob.proj_X(rng.uniform(0.05, 1.0, n))
            y = rng.normal(0, 0.5, prob.m)
            z = np.concatenate([x, y])
            worst = max(worst, finite_diff_check(
                lambda z: value(z[:n], z[n:]),
                lambda z: np.concatenate(grads(z[:n], z[n:])),
                [z], h=1e-6,
            ))
    return worst


def _check_contraction(rng):
    """Random convex quadratic LL; returns (violations, max ratio, bound)."""
    m = 8
    B = rng.normal(size=(m, m - 2))
    Q = B @ B.T / m  # positive semidefinite, singular
    L = float(np.linalg.eigvalsh(Q).max())
    gamma = 2.0
    eta = (1 / gamma) / (L + 1 / gamma) ** 2
    prob = ProblemSpec(
        n=m, m=m,
        eval_F=lambda x, y: 0.0, grad_F=lambda x, y: (np.zeros(m), np.zeros(m)),
        eval_f=lambda x, y: 0.5 * float(y @ Q @ y) - float(x @ y),
        grad_f=lambda x, y: (-y, Q @ y - x),
    )
    sigma = contraction_factor(eta, gamma, 0.0, 0.0)
    violations, worst = 0, 0.0
    for _ in range(100):
        x, y = rng.normal(size=m), rng.normal(size=m)
        theta_star = np.linalg.solve(Q + np.eye(m) / gamma, x + y / gamma)
        theta = rng.normal(scale=3.0, size=m)
        for _ in range(5):
            nxt = theta_step(prob, x, y, theta, eta, gamma)
            d0 = np.linalg.norm(theta - theta_star)
            if d0 < 1e-8:
                break
            ratio = float(np.linalg.norm(nxt - theta_star) / d0)
            worst = max(worst, ratio)
            violations += ratio > sigma + 1e-9
            theta = nxt
    return violations, worst, sigma


def _lower_level_residual(bundle: ProblemBundle) -> float:
    """Prox-gradient fixed-point residual of y* for the lower level at x*."""
    sol, prob = bundle.solution, bundle.spec
    x, y = sol.x_star, sol.y_star
    _, fy = prob.grad_f(x, y)
    return float(np.linalg.norm(y - prob.prox(x, 1.0, y - np.asarray(fy))))


def _check_stationarity(bundles) -> float:
    worst = 0.0
    for b in bundles:
        if b.solution is None or b.solution.x_star is None or b.solution.y_star is None:
            continue
        worst = max(worst, _lower_level_residual(b))
        if b.solution.F_star is not None:
            F = float(b.spec.eval_F(b.solution.x_star, b.solution.y_star))
            worst = max(worst, abs(F - b.solution.F_star) / max(1.0, abs(b.solution.F_star)))
        if b.name == "strong_convex_toy":
            n = b.spec.n
            hg = hypergradient_quadratic(np.eye(n), -np.eye(n), b.spec, b.solution.x_star, lambda x: x.copy())
            worst = max(worst, float(np.linalg.norm(hg)))
    return worst


def _feasible_point(bundle: ProblemBundle, rng):
    prob = bundle.spec
    x = prob.proj_X(rng.uniform(0.05, 1.0, prob.n) if bundle.name in ("lasso_toy", "group_lasso")
                    else rng.normal(size=prob.n))
    y = prob.proj_Y(rng.normal(size=prob.m))
    return x, y


def _check_bundle_gradients(bundles, rng, points: int = 20) -> float:
    worst = 0.0
    for b in bundles:
        prob, n = b.spec, b.spec.n
        pts = [np.concatenate(_feasible_point(b, rng)) for _ in range(points)]
        pairs = [(prob.eval_F, prob.grad_F), (prob.eval_f, prob.grad_f)]
        for fn, gr in pairs:
            worst = max(worst, finite_diff_check(
                lambda z, fn=fn: fn(z[:n], z[n:]),
                lambda z, gr=gr: np.concatenate([np.asarray(v, dtype=float) for v in gr(z[:n], z[n:])]),
                pts,
            ))
        if not prob.smooth_only:
            # g is linear in x but nonsmooth in y, so only the x block is checked
            worst = max(worst, _fd_x_only(prob.eval_g, prob.grad_x_g, pts, n))
    return worst


def _fd_x_only(fn, grad_x, pts, n, h=1e-6) -> float:
    worst = 0.0
    for z in pts:
        x, y = z[:n], z[n:]
        worst = max(worst, finite_diff_check(lambda xx: fn(xx, y), lambda xx: grad_x(xx, y), [x], h))
    return worst


def default_check_bundles() -> list:
    return [
        build("strong_convex_toy", dim=20),
        build("merely_convex", dim=10),
        build("sin_nonconvex", dim=1),
        build("sin_nonconvex", dim=5),
        build("lasso_toy", dim=10),
        build("group_lasso", dim=150, groups=30),
    ]


def run_checks(bundles: Optional[list] = None, seed: int = 0):
    """Execute the verification battery; returns ``(report, failures)``."""
    rng = np.random.default_rng(seed)
    bundles = default_check_bundles() if bundles is None else bundles
    report = DiagnosticsReport()
    failures = []

    report.prox_oracle_max_error = _check_prox(rng)
    if report.prox_oracle_max_error > 2.0:
        failures.append(f"prox oracle error {report.prox_oracle_max_error:.3g} grid spacings exceeds 2")

    moreau_err = _check_moreau(rng)
    grad_err = _check_bundle_gradients(bundles, rng)
    report.max_grad_fd_error = max(moreau_err, grad_err)
    if moreau_err > CHECK_FD_TOL:
        failures.append(f"Moreau gradient finite-difference error {moreau_err:.3g}")
    if grad_err > CHECK_FD_TOL:
        failures.append(f"bundle gradient finite-difference error {grad_err:.3g}")

    v, ratio, sigma = _check_contraction(rng)
    report.contraction_violations, report.max_contraction_ratio, report.contraction_bound = v, ratio, sigma
    if v:
        failures.append(f"{v} contraction steps exceed sigma={sigma:.6g}")

    report.max_stationarity_violation = _check_stationarity(bundles)
    if report.max_stationarity_violation > CHECK_STAT_TOL:
        failures.append(f"analytic solution violates stationarity by {report.max_stationarity_violation:.3g}")
    return report, failures


def cmd_check(bundles: Optional[list] = None) -> int:
    try:
        report, failures = run_checks(bundles)
    except (ArithmeticError, ValueError, NumericalFailure) as exc:
        print(f"check aborted: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for f in dataclasses.fields(report):
        print(f"{f.name}: {getattr(report, f.name)}")
    for msg in failures:
        print(f"FAIL: {msg}")
    print("all checks passed" if not failures else f"{len(failures)} check(s) failed")
    return EXIT_OK if not failures else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meha", description="Single-loop Moreau-envelope bilevel solver")
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one config")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p = sub.add_parser("sweep", help="run the cross product of list-valued keys")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    sub.add_parser("check", help="run the built-in verification battery")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.out)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.out, args.jobs)
    return cmd_check()


if __name__ == "__main__":
    sys.exit(main())
