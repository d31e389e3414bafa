"""Direct solves for the (nearly) banded M-matrix systems of policy iteration.

Small-bandwidth systems go through LAPACK's banded LU (``gbtrf``/``gbtrs``)
after an optional reordering; anything wider falls back to SuperLU.  Rows
are scaled by their diagonal first: penalised rows are ``rho`` times larger
than the rest, and without the scaling round-off grows like ``rho * eps``.  A zero
or negligible pivot is reported as ``SINGULAR`` instead of raising, since a
singular policy matrix is an expected outcome of the direct control scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg.lapack import dgbtrf, dgbtrs

SOLVER_TOL = 1e-12
PIVOT_TOL = 1e-14
BAND_LIMIT = 64

OK = "ok"
SINGULAR = "singular"
NOT_DIAGONALLY_DOMINANT = "not_diagonally_dominant"
DIMENSION_MISMATCH = "dimension_mismatch"


@dataclass
class LinearSolveOutcome:
    x: np.ndarray | None
    status: str
    residual: float = np.nan
    token: object = None

    @property
    def ok(self) -> bool:
        return self.status == OK


@dataclass
class _BandedLU:
    lu: np.ndarray
    piv: np.ndarray
    kl: int
    ku: int
    pos: np.ndarray | None
    scale: np.ndarray
    norm: float = 0.0

    def solve(self, b):
        b = self.scale * b
        rhs = b if self.pos is None else _permute(b, self.pos)
        y, info = dgbtrs(self.lu, self.kl, self.ku, rhs, self.piv)
        return y if self.pos is None else y[self.pos]


@dataclass
class _SparseLU:
    lu: object
    scale: np.ndarray
    norm: float = 0.0

    def solve(self, b):
        return self.lu.solve(self.scale * b)


def _permute(b, pos):
    out = np.empty_like(b)
    out[pos] = b
    return out


def check_csr(A) -> sp.csr_matrix:
    """Canonical CSR: sorted column indices, duplicates summed."""
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def bandwidth(A, ordering=None) -> tuple[int, int]:
    """Lower and upper bandwidth, optionally under ``ordering`` (see :func:`reorder_interleaved`)."""
    coo = sp.coo_matrix(A)
    r, c = coo.row, coo.col
    if ordering is not None:
        pos = np.empty_like(ordering)
        pos[ordering] = np.arange(ordering.size)
        r, c = pos[r], pos[c]
    if r.size == 0:
        return 0, 0
    return int(max(0, (r - c).max())), int(max(0, (c - r).max()))


def reorder_interleaved(A, regime_count: int, nodes_per_regime: int):
    """Permute regime-major unknowns to node-major order.

    Returns ``(P A P^T, perm)`` with ``perm[q]`` the original index of new
    position ``q``; ``x = x_new[argsort(perm)]`` undoes it.
    """
    N = regime_count * nodes_per_regime
    if A.shape != (N, N):
        raise ValueError(f"matrix is {A.shape}, expected {(N, N)}")
    perm = (np.arange(regime_count)[None, :] * nodes_per_regime
            + np.arange(nodes_per_regime)[:, None]).ravel()
    A = sp.csr_matrix(A)
    return check_csr(A[perm][:, perm]), perm


def _is_diagonally_dominant(A: sp.csr_matrix) -> bool:
    d = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    return bool(np.all(np.abs(d) > off))


def _inf_norm(coo) -> float:
    if coo.nnz == 0:
        return 0.0
    return float(np.bincount(coo.row, weights=np.abs(coo.data), minlength=coo.shape[0]).max())


def _row_scale(coo) -> np.ndarray:
    d = np.zeros(coo.shape[0])
    on = coo.row == coo.col
    d[coo.row[on]] = np.abs(coo.data[on])
    return np.divide(1.0, d, out=np.ones_like(d), where=d > 0)


def factorize(A, ordering=None, pivot_tol: float = PIVOT_TOL, band_limit: int = BAND_LIMIT):
    """Factor ``D A`` with ``D`` the inverse diagonal; returns a reusable token, or ``None`` if singular."""
    coo = check_csr(A).tocoo()
    N = coo.shape[0]
    scale = _row_scale(coo)
    coo = sp.coo_matrix((coo.data * scale[coo.row], (coo.row, coo.col)), shape=coo.shape)
    norm = _inf_norm(coo)
    r, c = coo.row, coo.col
    pos = None
    if ordering is not None:
        pos = np.empty(N, dtype=np.int64)
        pos[ordering] = np.arange(N)
        r, c = pos[r], pos[c]
    kl = int(max(0, (r - c).max())) if r.size else 0
    ku = int(max(0, (c - r).max())) if r.size else 0
    if kl + ku + 1 <= band_limit:
        ab = np.zeros((2 * kl + ku + 1, N))
        ab[kl + ku + r - c, c] = coo.data
        lu, piv, info = dgbtrf(ab, kl, ku, overwrite_ab=1)
        if info > 0 or np.min(np.abs(lu[kl + ku])) <= pivot_tol * norm:
            return None
        return _BandedLU(lu, piv, kl, ku, pos, scale, norm)
    try:
        lu = spla.splu(coo.tocsc(), permc_spec="COLAMD")
    except RuntimeError:
        return None
    if np.min(np.abs(lu.U.diagonal())) <= pivot_tol * norm:
        return None
    return _SparseLU(lu, scale, norm)


def solve(A, b, ordering=None, token=None, solver_tol: float = SOLVER_TOL, pivot_tol: float = PIVOT_TOL,
          band_limit: int = BAND_LIMIT, check_dominance: bool = False, refine: int = 2) -> LinearSolveOutcome:
    """Solve ``A x = b``; never raises on singular input.

    ``ordering`` is a permutation (as returned by :func:`reorder_interleaved`)
    applied before the banded factorisation.  ``token`` reuses a previous
    factorisation of the same matrix.  Success means the backward-error bound
    ``||A x - b|| <= solver_tol * (||b|| + ||A|| ||x||)`` holds, with up to
    ``refine`` steps of iterative refinement to reach it.
    """
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
        return LinearSolveOutcome(None, DIMENSION_MISMATCH)
    A = check_csr(A)
    if check_dominance and not _is_diagonally_dominant(A):
        return LinearSolveOutcome(None, NOT_DIAGONALLY_DOMINANT)
    if token is None:
        token = factorize(A, ordering, pivot_tol, band_limit)
        if token is None:
            return LinearSolveOutcome(None, SINGULAR)
    x = token.solve(b)
    if not np.all(np.isfinite(x)):
        return LinearSolveOutcome(None, SINGULAR)
    norm = _inf_norm(A.tocoo())
    bnorm = float(np.abs(b).max(initial=0.0))
    res = b - A @ x
    rnorm = float(np.abs(res).max(initial=0.0))
    for _ in range(refine):
        if rnorm <= solver_tol * (bnorm + norm * np.abs(x).max(initial=0.0)):
            break
        x = x + token.solve(res)
        res = b - A @ x
        rnorm = float(np.abs(res).max(initial=0.0))
    return LinearSolveOutcome(x, OK, rnorm, token)
