"""Penalty and policy-iteration solvers for systems of HJB quasi-variational inequalities."""

from .discretize import DiscreteSystem, Grid1D, assemble, export_triplets
from .estimators import DirectControlSolver, IteratedOptimalStopping, PenaltySolver
from .model import constant_problem, load_problem, optimal_switching_problem, problem_from_dict
from .solvers import (
    SolveReport,
    StoppingCriterion,
    iterated_optimal_stopping,
    solve_continuation,
    solve_direct,
    solve_penalized,
    solve_per_strategy_penalty,
)

__version__ = "0.1.0"

__all__ = [
    "DirectControlSolver", "DiscreteSystem", "Grid1D", "IteratedOptimalStopping", "PenaltySolver", "SolveReport",
    "StoppingCriterion", "assemble", "constant_problem", "export_triplets", "iterated_optimal_stopping",
    "load_problem", "optimal_switching_problem", "problem_from_dict", "solve_continuation", "solve_direct",
    "solve_penalized", "solve_per_strategy_penalty",
]
