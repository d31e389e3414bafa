"""Monotone finite-difference discretisation on a uniform 1-D grid.

Unknowns are ordered regime-major, ``p = i * L + l``.  Everything stored in
a :class:`DiscreteSystem` is in the max (cost) form: for a reward problem
(``orientation="min"``) the rewards and boundary data are negated so that
the discrete unknown is ``v = -u``.  Costs keep their sign in both forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .model import ImpulseRule, SwitchingCosts, SwitchingProblem

Array = np.ndarray


class AssemblyError(ValueError):
    """The discretisation would not be monotone, or an impulse leaves the domain."""


@dataclass(frozen=True)
class Grid1D:
    """Nodes ``x_lo + l h`` for ``l = 0..L-1``; ``x_hi = x_lo + L h`` carries Dirichlet data."""

    x_lo: float
    x_hi: float
    h: float

    def __post_init__(self):
        L = (self.x_hi - self.x_lo) / self.h
        if self.h <= 0 or abs(L - round(L)) > 1e-9 * max(L, 1.0) or round(L) < 1:
            raise ValueError(f"h={self.h} does not divide [{self.x_lo}, {self.x_hi}]")

    @classmethod
    def from_exponent(cls, n: int, domain=(0.0, 2.0)) -> "Grid1D":
        return cls(float(domain[0]), float(domain[1]), 2.0 ** (-n))

    @property
    def size(self) -> int:
        return int(round((self.x_hi - self.x_lo) / self.h))

    @property
    def nodes(self) -> Array:
        return self.x_lo + self.h * np.arange(self.size)

    def index_of(self, x: float) -> int:
        """Index of the node at ``x``; raises if ``x`` is not a grid node."""
        s = (x - self.x_lo) / self.h
        l = int(round(s))
        if abs(s - l) > 1e-9 or not 0 <= l < self.size:
            raise ValueError(f"x={x} is not an unknown node of the grid")
        return l


@dataclass(frozen=True)
class DiscreteSystem:
    """Assembled system ``max_a(A_a v - l_a, v - min_z(G_z v + K_z)) = 0``.

    ``operators[s]`` / ``rewards[s]`` hold control slot ``s`` (regimes with
    fewer control samples repeat their last one).  Candidate ``q`` of the
    intervention belongs to row ``owner[q]`` and has interpolation row
    ``G[q]``, cost ``K[q]`` (boundary data folded in) and label ``target[q]``
    (the destination regime for switching, the candidate index for impulses).
    Candidates are sorted by owner; ``cand_ptr`` delimits each row's block.
    """

    regime_count: int
    nodes_per_regime: int
    operators: tuple
    rewards: tuple
    G: sp.csr_matrix
    K: Array
    owner: Array
    target: Array
    orientation: str = "max"
    kind: str = "switching"
    grid: Grid1D | None = None
    boundary: Array | None = None
    lambda0: float = 0.0
    control_counts: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.regime_count * self.nodes_per_regime

    @property
    def sign(self) -> float:
        return 1.0 if self.orientation == "max" else -1.0

    @property
    def n_slots(self) -> int:
        return len(self.operators)

    @property
    def cand_ptr(self) -> Array:
        return np.searchsorted(self.owner, np.arange(self.size + 1))

    @property
    def has_intervention(self) -> bool:
        return self.K.size > 0

    def index(self, regime: int, node: int) -> int:
        return regime * self.nodes_per_regime + node

    def regime_block(self, v: Array, regime: int) -> Array:
        L = self.nodes_per_regime
        return np.asarray(v)[regime * L:(regime + 1) * L]

    def intervention_values(self, v: Array) -> Array:
        """Candidate values ``G v + K`` (max-form unknown)."""
        return self.G @ v + self.K

    def interleave_permutation(self) -> Array:
        """``perm[q]`` = regime-major index of node-major position ``q``."""
        M, L = self.regime_count, self.nodes_per_regime
        return (np.arange(M)[None, :] * L + np.arange(L)[:, None]).ravel()

    @classmethod
    def from_arrays(cls, operators, rewards, regime_count: int, candidates=(), orientation="max",
                    kind="switching", lambda0: float | None = None) -> "DiscreteSystem":
        """Build a system directly from matrices.

        ``candidates`` is an iterable of ``(owner, {col: weight}, cost, target)``.
        """
        if not isinstance(operators, (list, tuple)):
            operators, rewards = [operators], [rewards]
        ops = tuple(sp.csr_matrix(A, dtype=float) for A in operators)
        rws = tuple(np.asarray(r, dtype=float).ravel() for r in rewards)
        N = ops[0].shape[0]
        if N % regime_count:
            raise ValueError("size is not a multiple of regime_count")
        G, K, owner, target = _candidate_arrays(list(candidates), N)
        if lambda0 is None:
            lambda0 = min(_row_margin(A).min() for A in ops)
        return cls(regime_count=regime_count, nodes_per_regime=N // regime_count, operators=ops,
                   rewards=rws, G=G, K=K, owner=owner, target=target, orientation=orientation,
                   kind=kind if K.size else "none", lambda0=float(lambda0),
                   control_counts=(len(ops),) * regime_count)


def _candidate_arrays(cands, N):
    cands = sorted(cands, key=lambda c: c[0])
    rows, cols, vals = [], [], []
    for q, (_, weights, _, _) in enumerate(cands):
        for col, w in weights.items():
            rows.append(q)
            cols.append(col)
            vals.append(w)
    G = sp.csr_matrix((vals, (rows, cols)), shape=(len(cands), N))
    K = np.array([c[2] for c in cands], dtype=float)
    owner = np.array([c[0] for c in cands], dtype=np.int64)
    target = np.array([c[3] for c in cands], dtype=np.int64)
    return G, K, owner, target


def _row_margin(A: sp.csr_matrix) -> Array:
    """``diag - sum |offdiag|`` per row."""
    A = sp.csr_matrix(A)
    d = A.diagonal()
    return d - (np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d))


def _regime_stencil(problem: SwitchingProblem, grid: Grid1D, i: int, a, left_boundary: str):
    """Lower, diagonal and upper coefficients (before coupling) for regime ``i``."""
    x = grid.nodes
    h = grid.h
    coef = problem.coefficients
    sig = coef.evaluate("diffusion", x, i, a)
    b = coef.evaluate("drift", x, i, a)
    c = coef.evaluate("discount", x, i, a)
    diff = 0.5 * sig**2 / h**2
    # full upwinding: forward where b >= 0, backward where b < 0
    upper = -diff - np.maximum(b, 0.0) / h
    lower = -diff - np.maximum(-b, 0.0) / h
    diag = c - upper - lower
    if lower[0] != 0.0:
        if left_boundary == "neumann":
            diag[0] += lower[0]
            lower[0] = 0.0
        else:
            raise AssemblyError(
                f"regime {i}, control {a!r}: node x={x[0]} needs a left neighbour "
                f"(coefficient {lower[0]:.3g}); use left_boundary='neumann' or a degenerate problem")
    return lower, diag, upper


def _switching_candidates(problem: SwitchingProblem, grid: Grid1D):
    rule: SwitchingCosts = problem.intervention
    M, L = problem.regime_count, grid.size
    x = grid.nodes
    owner, cols, K, target = [], [], [], []
    for i in range(M):
        for j in range(M):
            if j == i:
                continue
            owner.append(i * L + np.arange(L))
            cols.append(j * L + np.arange(L))
            K.append(rule.evaluate(x, i, j))
            target.append(np.full(L, j))
    if not owner:
        return sp.csr_matrix((0, M * L)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64)
    owner, cols, K, target = (np.concatenate(v) for v in (owner, cols, K, target))
    order = np.argsort(owner, kind="stable")
    owner, cols, K, target = owner[order], cols[order], K[order], target[order]
    n = owner.size
    G = sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, M * L))
    return G, K, owner.astype(np.int64), target.astype(np.int64)


def impulse_rows(problem: SwitchingProblem, grid: Grid1D, out_of_domain: str = "reject"):
    """Linear-interpolation rows for every admissible ``(regime, node, candidate)``.

    Returns ``(G, K, owner, target)`` in the max form.  Weight landing on the
    Dirichlet node ``x_hi`` is folded into ``K``.
    """
    rule: ImpulseRule = problem.intervention
    M, L, h = problem.regime_count, grid.size, grid.h
    x = grid.nodes
    gvals = problem.sign * np.asarray(problem.boundary_values, dtype=float)
    rows, cols, vals = [], [], []
    K, owner, target = [], [], []
    q = 0
    for i in range(M):
        for zi, z in enumerate(rule.candidates):
            dest, cost, mask = rule.evaluate(x, i, z)
            for l in np.flatnonzero(mask):
                y = dest[l]
                if y < grid.x_lo - 1e-12 * h or y > grid.x_hi + 1e-12 * h:
                    if out_of_domain == "clamp":
                        y = min(max(y, grid.x_lo), grid.x_hi)
                    else:
                        raise AssemblyError(
                            f"impulse candidate {z!r} from x={x[l]} in regime {i} lands at {y}, "
                            f"outside [{grid.x_lo}, {grid.x_hi}]")
                s = (y - grid.x_lo) / h
                m = int(np.floor(s + 1e-12))
                t = s - m
                if abs(t) < 1e-12:
                    t = 0.0
                k = cost[l]
                for node, w in ((m, 1.0 - t), (m + 1, t)):
                    if w == 0.0:
                        continue
                    if node >= L:
                        k += w * gvals[i]
                    else:
                        rows.append(q)
                        cols.append(i * L + max(node, 0))
                        vals.append(w)
                K.append(k)
                owner.append(i * L + l)
                target.append(zi)
                q += 1
    K = np.asarray(K, dtype=float)
    owner = np.asarray(owner, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    G = sp.csr_matrix((vals, (rows, cols)), shape=(q, M * L))
    order = np.argsort(owner, kind="stable")
    return G[order], K[order], owner[order], target[order]


def assemble(problem: SwitchingProblem, grid: Grid1D, left_boundary: str = "degenerate",
             out_of_domain: str = "reject") -> DiscreteSystem:
    """Assemble the upwind/central scheme for every control slot.

    Row ``(i, l)`` encodes ``-1/2 sigma^2 D2 - b D_upwind + c - coupling``;
    the Dirichlet node is eliminated into the reward.
    """
    M, L = problem.regime_count, grid.size
    N = M * L
    x = grid.nodes
    coef = problem.coefficients
    gvals = problem.sign * np.asarray(problem.boundary_values, dtype=float)
    counts = tuple(len(a) for a in problem.control_grid)
    operators, rewards = [], []
    lam = np.inf
    for s in range(max(counts)):
        rows, cols, vals = [], [], []
        ell = np.empty(N)
        for i in range(M):
            a = problem.control_grid[i][min(s, counts[i] - 1)]
            lower, diag, upper = _regime_stencil(problem, grid, i, a, left_boundary)
            base = i * L
            idx = base + np.arange(L)
            reward = problem.sign * coef.evaluate("reward", x, i, a)
            reward[-1] -= upper[-1] * gvals[i]
            ell[idx] = reward
            rows += [idx, idx[:-1], idx[1:]]
            cols += [idx, idx[1:], idx[:-1]]
            vals += [diag, upper[:-1], lower[1:]]
            margin = coef.evaluate("discount", x, i, a)
            for j in range(M):
                if j == i:
                    continue
                d = coef.evaluate("coupling", x, i, j, a)
                bad = np.flatnonzero(d < 0)
                if bad.size:
                    l = int(bad[0])
                    raise AssemblyError(f"positive off-diagonal at node {l} (x={x[l]}), regime {i}, "
                                        f"control {a!r}: coupling d[{i},{j}] = {d[l]} < 0")
                rows.append(idx)
                cols.append(j * L + np.arange(L))
                vals.append(-d)
                margin = margin - d
            lam = min(lam, float(margin.min()))
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        A.eliminate_zeros()
        _check_m_matrix(A, lam, grid, L, s)
        operators.append(A)
        rewards.append(ell)

    if problem.intervention is None or (isinstance(problem.intervention, SwitchingCosts) and M == 1):
        G, K = sp.csr_matrix((0, N)), np.zeros(0)
        owner = target = np.zeros(0, dtype=np.int64)
        kind = "none"
    elif isinstance(problem.intervention, SwitchingCosts):
        G, K, owner, target = _switching_candidates(problem, grid)
        kind = "switching"
    else:
        G, K, owner, target = impulse_rows(problem, grid, out_of_domain)
        kind = "impulse"
    return DiscreteSystem(
        regime_count=M, nodes_per_regime=L, operators=tuple(operators), rewards=tuple(rewards),
        G=G, K=K, owner=owner, target=target, orientation=problem.orientation, kind=kind,
        grid=grid, boundary=gvals, lambda0=lam, control_counts=counts,
        meta={"problem": problem.name, "params": dict(problem.params)},
    )


def _check_m_matrix(A: sp.csr_matrix, lam: float, grid: Grid1D, L: int, slot: int) -> None:
    coo = A.tocoo()
    off = coo.row != coo.col
    if np.any(coo.data[off] > 0):
        k = int(np.flatnonzero(off & (coo.data > 0))[0])
        p = int(coo.row[k])
        raise AssemblyError(f"positive off-diagonal in row {p} (regime {p // L}, node {p % L}), control slot {slot}")
    if not lam > 0:
        raise AssemblyError(f"discount minus coupling is not positive (lambda0 = {lam})")
    margin = _row_margin(A)
    slack = 64 * np.finfo(float).eps * np.abs(A.diagonal())
    if np.any(margin < lam * (1 - 1e-10) - slack):
        p = int(np.argmin(margin))
        raise AssemblyError(f"row {p} (regime {p // L}, node {p % L}) is not diagonally dominant by lambda0={lam}")


def assemble_switching_penalty_rows(sys: DiscreteSystem):
    """Rows ``u_{i,l} - u_{j,l}`` for every candidate, and costs ``b = -k_ij``.

    For two regimes with constant cost ``c`` the stacked matrix is
    ``[[I, -I], [-I, I]]`` and ``b = -c``.
    """
    if sys.kind not in ("switching", "none"):
        raise ValueError("system has no switching intervention")
    n = sys.K.size
    Own = sp.csr_matrix((np.ones(n), (np.arange(n), sys.owner)), shape=(n, sys.size))
    return (Own - sys.G).tocsr(), -sys.K.copy()


def assemble_impulse_rows(sys: DiscreteSystem, problem: SwitchingProblem, out_of_domain: str = "reject"):
    """Interpolation weights and costs of the impulse candidates on ``sys.grid``."""
    if not isinstance(problem.intervention, ImpulseRule):
        raise ValueError("problem has no impulse intervention")
    G, K, owner, target = impulse_rows(problem, sys.grid, out_of_domain)
    return G, K


# --------------------------------------------------------------------------
# plain-text export


def _write_triplets(fh, A):
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    fh.write(f"{coo.nnz}\n")
    for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        fh.write(f"{r} {c} {v:.17g}\n")


def _write_vector(fh, v):
    fh.write(f"{len(v)}\n")
    for val in v:
        fh.write(f"{val:.17g}\n" if isinstance(val, float) else f"{val}\n")


def export_triplets(sys: DiscreteSystem, path) -> None:
    """Write the system as ASCII sections of triplets and vectors (see README)."""
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write("qvipenalty-system 1\n")
        fh.write(f"{sys.size} {sys.regime_count} {sys.nodes_per_regime} {sys.n_slots} {sys.K.size} {sys.orientation}\n")
        for s, (A, ell) in enumerate(zip(sys.operators, sys.rewards)):
            fh.write(f"A {s} ")
            _write_triplets(fh, A)
            fh.write(f"l {s} ")
            _write_vector(fh, [float(v) for v in ell])
        fh.write("G ")
        _write_triplets(fh, sys.G)
        fh.write("K ")
        _write_vector(fh, [float(v) for v in sys.K])
        fh.write("owner ")
        _write_vector(fh, [int(v) for v in sys.owner])
        fh.write("target ")
        _write_vector(fh, [int(v) for v in sys.target])
