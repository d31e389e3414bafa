"""Policy iteration for penalised and direct discrete QVIs.

All kernels work on the max-form unknown ``v`` of a :class:`DiscreteSystem`
and hand back ``u = sign * v`` in the problem's own orientation.  In the max
form every policy iteration below produces componentwise non-increasing
iterates; for a reward (min-form) problem the user-facing iterates therefore
increase.

Three policy matrices share one assembly routine.  For a row ``p`` with
control slot ``a``, intervention flag ``beta`` and chosen candidate(s) ``q``:

* penalty:       ``A_a[p] + rho * beta * (e_p - G[q])``,   rhs ``l_a[p] + rho * beta * K[q]``
* per-strategy:  same, summed over every active candidate of row ``p``
* direct:        ``(1 - beta) A_a[p] + beta (e_p - G[q])``, rhs ``(1 - beta) l_a[p] + beta K[q]``

With a frozen obstacle (iterated optimal stopping) ``G[q] v + K[q]`` is
replaced by a fixed value ``psi[q]``.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import mlinalg
from .discretize import DiscreteSystem

CONVERGED = "Converged"
MAX_ITERATIONS = "MaxIterations"
SINGULAR_POLICY = "SingularPolicy"

TIE_TOL = 1e-14


@dataclass(frozen=True)
class StoppingCriterion:
    """``||u_k - u_{k-1}||_inf / max(||u_k||_inf, scale) < tol``."""

    tol: float = 1e-9
    scale: float = 1.0
    max_iterations: int = 100_000

    def __post_init__(self):
        if not (self.tol > 0 and self.scale > 0 and self.max_iterations >= 1):
            raise ValueError("tol, scale and max_iterations must be positive")

    def value(self, new: np.ndarray, old: np.ndarray) -> float:
        return float(np.abs(new - old).max() / max(np.abs(new).max(), self.scale))


@dataclass
class Policy:
    """Per-unknown control slot, intervention flag and chosen candidate.

    ``choice`` indexes the system's candidate list (-1 when not intervening);
    ``target`` is the matching label (destination regime or impulse index).
    ``active`` marks every penalised candidate for the per-strategy scheme.
    """

    control: np.ndarray
    intervene: np.ndarray
    choice: np.ndarray
    target: np.ndarray
    active: np.ndarray | None = None

    @classmethod
    def continuation(cls, sys: DiscreteSystem) -> "Policy":
        N = sys.size
        return cls(np.zeros(N, dtype=np.int64), np.zeros(N, dtype=bool),
                   np.full(N, -1, dtype=np.int64), np.full(N, -1, dtype=np.int64),
                   np.zeros(sys.K.size, dtype=bool))

    @classmethod
    def always_intervene(cls, sys: DiscreteSystem) -> "Policy":
        """Intervene wherever a candidate exists, using each row's first candidate."""
        pol = cls.continuation(sys)
        rows, first = np.unique(sys.owner, return_index=True)
        pol.intervene[rows] = True
        pol.choice[rows] = first
        pol.target[rows] = sys.target[first]
        pol.active[first] = True
        return pol


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations: int
    residual_history: list
    status: str
    wall_time: float
    rho: float | None
    policy: Policy | None
    scheme: str
    equation_residual: float = float("nan")
    stages: list = field(default_factory=list)
    iterates: list | None = None
    failed_iteration: int | None = None

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def to_dict(self, stride: int = 1) -> dict:
        return {
            "scheme": self.scheme,
            "status": self.status,
            "iterations": self.iterations,
            "rho": self.rho,
            "wall_time": self.wall_time,
            "equation_residual": self.equation_residual,
            "failed_iteration": self.failed_iteration,
            "stages": list(self.stages),
            "residual_history": [float(r) for r in self.residual_history],
            "solution_stride": stride,
            "solution": [float(v) for v in self.solution[::stride]] if self.solution is not None else None,
        }

    def to_json(self, path, stride: int = 1) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(stride), fh, indent=1)

    def history_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "criterion"])
            for k, r in enumerate(self.residual_history, start=1):
                w.writerow([k, f"{r:.6e}"])


class _Workspace:
    """Cached COO data of a system; shared read-only by the kernels."""

    def __init__(self, sys: DiscreteSystem):
        self.sys = sys
        self.N = sys.size
        self.coo = [A.tocoo() for A in sys.operators]
        self.ordering = None if sys.kind == "impulse" else sys.interleave_permutation()
        if sys.K.size:
            self.rows, self.starts = np.unique(sys.owner, return_index=True)
        else:
            self.rows = self.starts = np.zeros(0, dtype=np.int64)

    def pde_residuals(self, v):
        return np.array([A @ v - l for A, l in zip(self.sys.operators, self.sys.rewards)])

    def candidate_values(self, v, psi):
        return psi if psi is not None else self.sys.G @ v + self.sys.K

    def row_best(self, gap, incumbent):
        """Per-row max gap (``-inf`` without candidates) and argmax, keeping the incumbent on ties."""
        maxgap = np.full(self.N, -np.inf)
        choice = np.full(self.N, -1, dtype=np.int64)
        if gap.size == 0:
            return maxgap, choice
        owner = self.sys.owner
        seg = np.maximum.reduceat(gap, self.starts)
        maxgap[self.rows] = seg
        hit = np.flatnonzero(gap >= maxgap[owner])
        _, first = np.unique(owner[hit], return_index=True)
        choice[owner[hit[first]]] = hit[first]
        keep = incumbent >= 0
        keep[keep] = gap[incumbent[keep]] >= maxgap[keep] - TIE_TOL
        choice[keep] = incumbent[keep]
        return maxgap, choice

    def assemble(self, pol: Policy, mode: str, rho: float, psi):
        sys = self.sys
        N = self.N
        w = (~pol.intervene).astype(float) if mode == "direct" else np.ones(N)
        rows, cols, vals = [], [], []
        rhs = np.zeros(N)
        for s, coo in enumerate(self.coo):
            if len(self.coo) == 1:
                m = slice(None)
                rhs += w * sys.rewards[s]
            else:
                sel = pol.control == s
                m = sel[coo.row]
                rhs += np.where(sel, w * sys.rewards[s], 0.0)
            r = coo.row[m]
            rows.append(r)
            cols.append(coo.col[m])
            vals.append(coo.data[m] * w[r])
        if mode == "per_strategy":
            chosen = np.flatnonzero(pol.active)
        else:
            chosen = pol.choice[pol.intervene]
        scale = 1.0 if mode == "direct" else rho
        if chosen.size and scale != 0.0:
            own = sys.owner[chosen]
            rows.append(own)
            cols.append(own)
            vals.append(np.full(own.size, scale))
            if psi is None:
                sub = sys.G[chosen].tocoo()
                rows.append(own[sub.row])
                cols.append(sub.col)
                vals.append(-scale * sub.data)
                rhs += scale * np.bincount(own, weights=sys.K[chosen], minlength=N)
            else:
                rhs += scale * np.bincount(own, weights=psi[chosen], minlength=N)
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        return A, rhs

    def improve(self, v, pol: Policy, mode: str, psi) -> Policy:
        sys = self.sys
        R = self.pde_residuals(v)
        if R.shape[0] == 1:
            control = pol.control
            pde = R[0]
        else:
            best = R.argmax(axis=0)
            inc = R[pol.control, np.arange(self.N)]
            control = np.where(inc >= R.max(axis=0) - TIE_TOL, pol.control, best)
            pde = R[control, np.arange(self.N)]
        gap = v[sys.owner] - self.candidate_values(v, psi) if sys.K.size else np.zeros(0)
        if mode == "per_strategy":
            active = (gap > TIE_TOL) | ((np.abs(gap) <= TIE_TOL) & pol.active)
            counts = np.bincount(sys.owner[active], minlength=self.N)
            intervene = counts > 0
            maxgap, choice = self.row_best(gap, pol.choice)
            choice = np.where(intervene, choice, -1)
        else:
            maxgap, choice = self.row_best(gap, pol.choice)
            diff = maxgap - pde if mode == "direct" else maxgap
            intervene = np.where(diff > TIE_TOL, True, np.where(diff < -TIE_TOL, False, pol.intervene))
            intervene &= choice >= 0
            choice = np.where(intervene, choice, -1)
            active = np.zeros(sys.K.size, dtype=bool)
            active[choice[intervene]] = True
        target = np.where(choice >= 0, sys.target[np.maximum(choice, 0)] if sys.K.size else -1, -1)
        return Policy(control, intervene, choice, target, active)

    def equation_residual(self, v, mode: str, rho: float, psi) -> float:
        sys = self.sys
        pde = self.pde_residuals(v).max(axis=0)
        gap = v[sys.owner] - self.candidate_values(v, psi) if sys.K.size else np.zeros(0)
        if mode == "direct":
            maxgap, _ = self.row_best(gap, np.full(self.N, -1))
            F = np.maximum(pde, maxgap)
        elif mode == "per_strategy":
            F = pde + rho * np.bincount(sys.owner, weights=np.maximum(gap, 0.0), minlength=self.N)
        else:
            maxgap, _ = self.row_best(gap, np.full(self.N, -1))
            F = pde + rho * np.maximum(maxgap, 0.0)
        return float(np.abs(F).max())


def _workspace(sys: DiscreteSystem) -> _Workspace:
    return _Workspace(sys)


def _policy_iteration(sys, mode, rho, init, crit, scheme, init_policy=None, psi=None,
                      keep_iterates=False) -> SolveReport:
    t0 = time.perf_counter()
    ws = _workspace(sys)
    sign = sys.sign
    history: list[float] = []
    iterates = [] if keep_iterates else None

    def report(v, k, status, pol, failed=None):
        return SolveReport(
            solution=None if v is None else sign * v, iterations=k, residual_history=history, status=status,
            wall_time=time.perf_counter() - t0, rho=rho if mode != "direct" else None, policy=pol,
            scheme=scheme, equation_residual=ws.equation_residual(v, mode, rho, psi) if v is not None else np.nan,
            iterates=iterates, failed_iteration=failed)

    if init_policy is not None:
        pol = Policy.always_intervene(sys) if isinstance(init_policy, str) else init_policy
        A, rhs = ws.assemble(pol, mode, rho, psi)
        out = mlinalg.solve(A, rhs, ordering=ws.ordering)
        if not out.ok:
            if mode != "direct":
                raise RuntimeError("penalised policy matrix reported singular; this is a bug")
            return report(None if init is None else sign * np.asarray(init, float), 0, SINGULAR_POLICY, pol, 0)
        v = out.x
    else:
        if init is None:
            init = initial_guess_continuation_value(sys)
        v = sign * np.asarray(init, dtype=float)
        pol = Policy.continuation(sys)
    if keep_iterates:
        iterates.append(sign * v)

    for k in range(1, crit.max_iterations + 1):
        pol = ws.improve(v, pol, mode, psi)
        A, rhs = ws.assemble(pol, mode, rho, psi)
        out = mlinalg.solve(A, rhs, ordering=ws.ordering)
        if not out.ok:
            if mode != "direct":
                raise RuntimeError("penalised policy matrix reported singular; this is a bug")
            return report(v, k, SINGULAR_POLICY, pol, k)
        c = crit.value(out.x, v)
        history.append(c)
        v = out.x
        if keep_iterates:
            iterates.append(sign * v)
        if c < crit.tol:
            return report(v, k, CONVERGED, pol)
    return report(v, crit.max_iterations, MAX_ITERATIONS, pol)


def initial_guess_continuation_value(sys: DiscreteSystem) -> np.ndarray:
    """``A^{-1} l`` for the first control slot, ignoring interventions."""
    ordering = None if sys.kind == "impulse" else sys.interleave_permutation()
    out = mlinalg.solve(sys.operators[0], sys.rewards[0], ordering=ordering)
    if not out.ok:
        raise RuntimeError(f"continuation system failed ({out.status}); the operator is not an M-matrix")
    return sys.sign * out.x


def solve_penalized(sys: DiscreteSystem, rho: float, init=None, crit: StoppingCriterion | None = None,
                    keep_iterates: bool = False) -> SolveReport:
    """Policy iteration for ``A v - l + rho * max_q(v_p - G_q v - K_q)^+ = 0`` (max form)."""
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return _policy_iteration(sys, "penalty", float(rho), init, crit or StoppingCriterion(), "penalty",
                             keep_iterates=keep_iterates)


def solve_per_strategy_penalty(sys: DiscreteSystem, rho: float, init=None, crit: StoppingCriterion | None = None,
                               keep_iterates: bool = False) -> SolveReport:
    """Penalty summed over every candidate: ``rho * sum_q (v_p - G_q v - K_q)^+``."""
    if sys.kind == "impulse":
        raise ValueError("per-strategy penalty is implemented for switching systems")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return _policy_iteration(sys, "per_strategy", float(rho), init, crit or StoppingCriterion(), "per_strategy",
                             keep_iterates=keep_iterates)


def solve_direct(sys: DiscreteSystem, init=None, crit: StoppingCriterion | None = None, init_policy=None,
                 keep_iterates: bool = False) -> SolveReport:
    """Policy iteration on ``max(A v - l, v - M v) = 0`` without penalisation.

    ``init_policy`` (a :class:`Policy` or ``"all"``) starts from a policy
    instead of a vector; a singular policy matrix ends the run with status
    ``SingularPolicy``.
    """
    return _policy_iteration(sys, "direct", 0.0, init, crit or StoppingCriterion(), "direct",
                             init_policy=init_policy, keep_iterates=keep_iterates)


def solve_continuation(sys: DiscreteSystem, rho_target: float, crit: StoppingCriterion | None = None,
                       threshold: float = 200.0, rho_start: float = 100.0, per_strategy: bool = False) -> SolveReport:
    """Warm start at ``rho_start`` when ``rho_target > threshold``, then solve at ``rho_target``."""
    if rho_target <= 0:
        raise ValueError("rho_target must be positive")
    crit = crit or StoppingCriterion()
    solver = solve_per_strategy_penalty if per_strategy else solve_penalized
    if rho_target <= threshold:
        rep = solver(sys, rho_target, crit=crit)
        rep.stages = [rep.iterations]
        rep.scheme = "continuation"
        return rep
    first = solver(sys, rho_start, crit=crit)
    if not first.converged:
        first.stages = [first.iterations]
        first.scheme = "continuation"
        return first
    second = solver(sys, rho_target, init=first.solution, crit=crit)
    second.stages = [first.iterations, second.iterations]
    second.iterations = first.iterations + second.iterations
    second.residual_history = first.residual_history + second.residual_history
    second.wall_time += first.wall_time
    second.scheme = "continuation"
    return second


@dataclass
class StoppingSequence:
    """Outcome of iterated optimal stopping: one obstacle solve per stage."""

    solutions: list
    stages: list
    decrements: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.solutions[-1]


def iterated_optimal_stopping(sys: DiscreteSystem, n_max: int, inner: str = "direct", rho: float | None = None,
                              crit: StoppingCriterion | None = None, stop_tol: float | None = None) -> StoppingSequence:
    """Replace the QVI by obstacle problems with obstacle ``M v^{n-1}`` frozen.

    ``u^0`` is the continuation value; stage ``n`` solves
    ``max(A v - l, v - M v^{n-1}) = 0`` (``inner="direct"``) or its penalised
    version with parameter ``rho`` (``inner="penalty"``).  Stops after
    ``n_max`` stages, or earlier once the decrement drops below ``stop_tol``.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if inner not in ("direct", "penalty"):
        raise ValueError("inner must be 'direct' or 'penalty'")
    if inner == "penalty" and not rho:
        raise ValueError("penalty inner solver needs rho > 0")
    crit = crit or StoppingCriterion()
    sign = sys.sign
    u = initial_guess_continuation_value(sys)
    solutions = [u]
    stages = []
    dec = []
    for _ in range(n_max):
        v_prev = sign * solutions[-1]
        psi = sys.G @ v_prev + sys.K
        mode = "direct" if inner == "direct" else "penalty"
        rep = _policy_iteration(sys, mode, float(rho or 0.0), solutions[-1], crit, f"ios-{inner}", psi=psi)
        stages.append(rep)
        if rep.solution is None:
            break
        solutions.append(rep.solution)
        dec.append(float(np.abs(solutions[-2] - solutions[-1]).max()))
        if stop_tol is not None and dec[-1] < stop_tol:
            break
    return StoppingSequence(solutions, stages, np.array(dec))
