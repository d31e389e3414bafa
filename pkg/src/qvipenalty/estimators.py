"""Estimator-style wrappers around the solvers.

``fit`` takes a :class:`SwitchingProblem` (discretised on ``2**-mesh_exponent``)
or an already assembled :class:`DiscreteSystem`; ``predict`` interpolates the
fitted solution linearly, using the Dirichlet datum at ``x_hi``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import solvers
from .analysis import interpolate_solution
from .discretize import DiscreteSystem, Grid1D, assemble
from .model import SwitchingProblem


class _QVISolverBase(BaseEstimator):
    def __init__(self, mesh_exponent=10, tol=1e-9, scale=1.0, max_iter=100_000, left_boundary="degenerate",
                 out_of_domain="reject"):
        self.mesh_exponent = mesh_exponent
        self.tol = tol
        self.scale = scale
        self.max_iter = max_iter
        self.left_boundary = left_boundary
        self.out_of_domain = out_of_domain

    def _criterion(self):
        return solvers.StoppingCriterion(tol=float(self.tol), scale=float(self.scale),
                                         max_iterations=int(self.max_iter))

    def _system(self, X) -> DiscreteSystem:
        if isinstance(X, DiscreteSystem):
            return X
        if not isinstance(X, SwitchingProblem):
            raise TypeError(f"fit expects a SwitchingProblem or DiscreteSystem, got {type(X).__name__}")
        n = self.mesh_exponent
        if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
            raise ValueError(f"mesh_exponent must be a positive integer, got {n!r}")
        grid = Grid1D.from_exponent(int(n), X.domain)
        return assemble(X, grid, left_boundary=self.left_boundary, out_of_domain=self.out_of_domain)

    def fit(self, X, y=None, init=None):
        crit = self._criterion()
        self.system_ = self._system(X)
        self.report_ = self._solve(self.system_, init, crit)
        self.solution_ = self.report_.solution
        self.n_iter_ = self.report_.iterations
        self.status_ = self.report_.status
        return self

    def _solve(self, sys, init, crit):
        raise NotImplementedError

    def regime_values(self, regime: int) -> np.ndarray:
        check_is_fitted(self, "report_")
        if self.solution_ is None:
            raise RuntimeError(f"no solution available (status {self.status_})")
        return self.system_.regime_block(self.solution_, regime)

    def predict(self, x, regime: int = 0) -> np.ndarray:
        """Piecewise-linear value of the fitted solution in ``regime`` at ``x``."""
        self.regime_values(regime)
        return interpolate_solution(self.system_, self.solution_, x, regime)


class PenaltySolver(_QVISolverBase):
    """Penalised policy iteration, optionally with continuation in ``rho`` or per-strategy penalties."""

    def __init__(self, rho=1e5, continuation=False, per_strategy=False, mesh_exponent=10, tol=1e-9, scale=1.0,
                 max_iter=100_000, left_boundary="degenerate", out_of_domain="reject"):
        super().__init__(mesh_exponent, tol, scale, max_iter, left_boundary, out_of_domain)
        self.rho = rho
        self.continuation = continuation
        self.per_strategy = per_strategy

    def _solve(self, sys, init, crit):
        if not np.isfinite(self.rho) or self.rho < 0:
            raise ValueError(f"rho must be a finite nonnegative number, got {self.rho!r}")
        if self.continuation and init is None:
            return solvers.solve_continuation(sys, self.rho, crit, per_strategy=self.per_strategy)
        if self.per_strategy:
            return solvers.solve_per_strategy_penalty(sys, self.rho, init, crit)
        return solvers.solve_penalized(sys, self.rho, init, crit)


class DirectControlSolver(_QVISolverBase):
    """Policy iteration on the unpenalised discrete QVI; may end with ``SingularPolicy``."""

    def __init__(self, init_policy=None, mesh_exponent=10, tol=1e-9, scale=1.0, max_iter=100_000,
                 left_boundary="degenerate", out_of_domain="reject"):
        super().__init__(mesh_exponent, tol, scale, max_iter, left_boundary, out_of_domain)
        self.init_policy = init_policy

    def _solve(self, sys, init, crit):
        return solvers.solve_direct(sys, init, crit, init_policy=self.init_policy)


class IteratedOptimalStopping(_QVISolverBase):
    """Sequence of obstacle problems with frozen intervention obstacle."""

    def __init__(self, n_max=50, inner="direct", rho=None, stop_tol=None, mesh_exponent=10, tol=1e-9, scale=1.0,
                 max_iter=100_000, left_boundary="degenerate", out_of_domain="reject"):
        super().__init__(mesh_exponent, tol, scale, max_iter, left_boundary, out_of_domain)
        self.n_max = n_max
        self.inner = inner
        self.rho = rho
        self.stop_tol = stop_tol

    def _solve(self, sys, init, crit):
        seq = solvers.iterated_optimal_stopping(sys, self.n_max, self.inner, self.rho, crit, self.stop_tol)
        self.sequence_ = seq
        self.decrements_ = seq.decrements
        last = seq.stages[-1]
        status = solvers.CONVERGED if all(s.converged for s in seq.stages) else last.status
        return solvers.SolveReport(
            solution=seq.final, iterations=len(seq.stages), residual_history=list(seq.decrements),
            status=status, wall_time=sum(s.wall_time for s in seq.stages), rho=self.rho, policy=last.policy,
            scheme=f"ios-{self.inner}", stages=[s.iterations for s in seq.stages])
