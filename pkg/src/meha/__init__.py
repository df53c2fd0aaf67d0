"""Single-loop, Hessian-free bilevel optimisation via the Moreau envelope of the lower level."""

from .core import (
    AnalyticSolution,
    IterateState,
    NumericalFailure,
    ProblemConstants,
    ProblemSpec,
    SolverConfig,
    StopRule,
    group_soft_threshold,
    project_box,
    prox_bruteforce_oracle,
    soft_threshold,
    validate_config,
)
from .moreau import MoreauEval, contraction_factor, moreau_gradient, moreau_value, solve_theta_star, theta_step
from .solver import RunResult, Schedule, meha_step, penalty_at, run, stepsize_at

__version__ = "0.1.0"
