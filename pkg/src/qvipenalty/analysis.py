"""Post-processing of penalised solutions: action regions, impulse policies, rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretize import DiscreteSystem
from .solvers import Policy, solve_direct, solve_penalized

EXACT_REGION_TOL = 1e-8


def interpolate_solution(sys: DiscreteSystem, u, x, regime: int = 0) -> np.ndarray:
    """Piecewise-linear value of ``u`` in ``regime`` at ``x``, using the Dirichlet datum at ``x_hi``."""
    if sys.grid is None:
        raise ValueError("interpolation needs a grid; the system was built from raw arrays")
    if not 0 <= regime < sys.regime_count:
        raise ValueError(f"regime {regime} out of range [0, {sys.regime_count})")
    g = sys.grid
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any((x < g.x_lo) | (x > g.x_hi)):
        raise ValueError(f"x must lie in [{g.x_lo}, {g.x_hi}]")
    bnd = 0.0 if sys.boundary is None else sys.sign * sys.boundary[regime]
    ys = np.append(sys.regime_block(u, regime), bnd)
    return np.interp(x, np.append(g.nodes, g.x_hi), ys)


def obstacle_gap(u, sys: DiscreteSystem) -> np.ndarray:
    """``v_p - min_q(G_q v + K_q)`` per unknown in the max form (``+inf`` without candidates).

    Zero means intervening is optimal; the sign convention does not depend
    on the problem's orientation.
    """
    v = sys.sign * np.asarray(u, dtype=float)
    best = np.full(sys.size, np.inf)
    if sys.K.size:
        np.minimum.at(best, sys.owner, sys.G @ v + sys.K)
    return v - best


def hausdorff_distance(a, b) -> float:
    """Hausdorff distance between two finite point sets on the line."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        return np.inf
    d = np.abs(a[:, None] - b[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


@dataclass
class ActionRegion:
    """Per-regime node indices where ``|u_i - M_i u| <= omega``."""

    omega: float
    regions: list
    naive: list
    coordinates: np.ndarray
    gap: np.ndarray
    hausdorff: list | None = None

    def points(self, regime: int) -> np.ndarray:
        return self.coordinates[self.regions[regime]]

    def contains(self, regime: int, node: int) -> bool:
        return node in set(self.regions[regime].tolist())


def _coordinates(sys: DiscreteSystem) -> np.ndarray:
    return sys.grid.nodes if sys.grid is not None else np.arange(sys.nodes_per_regime, dtype=float)


def action_region(u, sys: DiscreteSystem, omega: float, u_other=None) -> ActionRegion:
    """Inflated action region of a penalised solution.

    With ``u_other`` (e.g. the solution at ``2 rho``) the per-regime
    Hausdorff distance between the two regions, in units of ``x``, is
    returned as well.
    """
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    gap = obstacle_gap(u, sys)
    L = sys.nodes_per_regime
    regions, naive = [], []
    for i in range(sys.regime_count):
        g = gap[i * L:(i + 1) * L]
        regions.append(np.flatnonzero(np.abs(g) <= omega))
        naive.append(np.flatnonzero(g == 0.0))
    xs = _coordinates(sys)
    region = ActionRegion(omega=omega, regions=regions, naive=naive, coordinates=xs, gap=gap)
    if u_other is not None:
        other = action_region(u_other, sys, omega)
        region.hausdorff = [hausdorff_distance(xs[a], xs[b]) for a, b in zip(regions, other.regions)]
    return region


def calibrate_modulus(u_rho, u_2rho) -> tuple[float, float]:
    """``(2 ||u_rho - u_2rho||_inf, ||u_rho - u_2rho||_inf)``.

    Under first-order decay ``u_rho = u + C / rho`` the doubled difference is
    exactly ``C / rho``.
    """
    raw = float(np.abs(np.asarray(u_rho, dtype=float) - np.asarray(u_2rho, dtype=float)).max())
    return 2.0 * raw, raw


@dataclass
class ImpulseChoice:
    regime: int
    node: int
    x: float
    targets: tuple
    gap: float
    ambiguous: bool


def extract_impulse_policy(u, sys: DiscreteSystem, region: ActionRegion, omega: float | None = None,
                           tie_tol: float = 1e-12) -> list[ImpulseChoice]:
    """Minimising candidate(s) at every region node.

    ``gap`` is the distance from the best to the next-best candidate value.
    When ``omega`` is given, nodes with ``gap <= 2 omega`` are flagged
    ambiguous: the argmin at this penalty level cannot be told apart from a
    neighbour's.
    """
    v = sys.sign * np.asarray(u, dtype=float)
    values = sys.G @ v + sys.K
    ptr = sys.cand_ptr
    L = sys.nodes_per_regime
    xs = _coordinates(sys)
    out = []
    for i, nodes in enumerate(region.regions):
        for l in nodes:
            p = i * L + int(l)
            lo, hi = ptr[p], ptr[p + 1]
            if lo == hi:
                continue
            vals = values[lo:hi]
            best = vals.min()
            tie = np.abs(vals - best) <= tie_tol * max(1.0, abs(best))
            targets = tuple(int(t) for t in sys.target[lo:hi][tie])
            rest = vals[~tie]
            gap = float(rest.min() - best) if rest.size else np.inf
            amb = omega is not None and gap <= 2.0 * omega
            out.append(ImpulseChoice(i, int(l), float(xs[l]), targets, gap, bool(amb)))
    return out


@dataclass
class RateEstimate:
    abscissae: np.ndarray
    errors: np.ndarray
    slope: float
    ratios: np.ndarray
    intercept: float = np.nan


def estimate_rate(points) -> RateEstimate:
    """Least-squares slope of ``log(error)`` against ``log(abscissa)``.

    Two points give ratios only (``slope`` is ``nan``); three or more give a
    fitted slope.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need a list of at least two (abscissa, error) pairs")
    x, e = pts[:, 0], pts[:, 1]
    if np.any(e <= 0) or np.any(x <= 0):
        raise ValueError("abscissae and errors must be positive")
    dx = np.diff(x)
    if not (np.all(dx > 0) or np.all(dx < 0)):
        raise ValueError("abscissae must be strictly monotone")
    ratios = e[:-1] / e[1:]
    slope = intercept = np.nan
    if x.size >= 3:
        slope, intercept = np.polyfit(np.log(x), np.log(e), 1)
    return RateEstimate(x, e, float(slope), ratios, float(intercept))


def log_linear_fit(values) -> tuple[float, float]:
    """Slope and R^2 of ``log(values)`` against the index; used for geometric decay."""
    y = np.log(np.asarray(values, dtype=float))
    n = np.arange(y.size, dtype=float)
    slope, icpt = np.polyfit(n, y, 1)
    resid = y - (slope * n + icpt)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


# --------------------------------------------------------------------------
# closed-form counterexamples


def two_point_system(b: float, c: float) -> DiscreteSystem:
    """``max(v1 - b, v1 - (v2 + c)) = 0``, ``max(v2 - 2b, v2 - (v1 + c)) = 0``."""
    cands = [(0, {1: 1.0}, c, 1), (1, {0: 1.0}, c, 0)]
    return DiscreteSystem.from_arrays(np.eye(2), np.array([b, 2 * b]), regime_count=2, candidates=cands)


def scalar_self_impulse_system(g: float, c: float) -> DiscreteSystem:
    """``max(u - g, u - (u + c)) = 0``: an impulse that returns to the same state."""
    return DiscreteSystem.from_arrays(np.eye(1), np.array([g]), regime_count=1,
                                      candidates=[(0, {0: 1.0}, c, 0)], kind="impulse")


@dataclass
class CounterexampleReport:
    b: float
    c: float
    rho: float
    exact: np.ndarray
    penalized_closed_form: np.ndarray
    penalized_generic: np.ndarray
    direct_generic: np.ndarray
    naive_region: list
    inflated_region: list
    omega: float
    self_impulse_status: str
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def penalty_counterexamples(b: float = 1.0, c: float = 0.25, rho: float = 3.0, g: float = 1.0,
                           atol: float = 1e-12) -> CounterexampleReport:
    """Solve the two-point QVI and the self-impulse QVI in closed form and generically.

    The penalised two-point solution is ``(b, b + c + (b - c) / (1 + rho))``:
    its naive action region is empty for every ``rho`` while the one inflated
    by ``omega = (b - c) / (1 + rho)`` recovers the exact region ``{1}``
    (0-based).  Direct policy iteration on the self-impulse QVI, started
    from the intervention policy, hits a singular matrix.
    """
    if not b > c > 0:
        raise ValueError("need b > c > 0")
    sys = two_point_system(b, c)
    exact = np.array([b, b + c])
    closed = np.array([b, b + c + (b - c) / (1.0 + rho)])
    pen = solve_penalized(sys, rho, init=np.array([b, 2 * b]))
    direct = solve_direct(sys, init=np.array([b, 2 * b]))
    omega = (b - c) / (1.0 + rho)
    naive = action_region(pen.solution, sys, 0.0).naive
    inflated = action_region(pen.solution, sys, omega * (1 + 1e-9)).regions
    scalar = scalar_self_impulse_system(g, c)
    singular = solve_direct(scalar, init_policy=Policy.always_intervene(scalar))
    checks = {
        "penalized_matches_closed_form": bool(np.abs(pen.solution - closed).max() <= atol),
        "direct_matches_exact": bool(np.abs(direct.solution - exact).max() <= atol),
        "naive_region_empty": all(r.size == 0 for r in naive),
        "inflated_region_is_second_index": [r.tolist() for r in inflated] == [[], [0]],
        "self_impulse_singular": singular.status == "SingularPolicy",
    }
    return CounterexampleReport(b, c, rho, exact, closed, pen.solution, direct.solution,
                                naive, inflated, omega, singular.status, checks)
