"""Continuous description of weakly coupled HJB quasi-variational inequalities.

A problem is a set of regimes ``i = 0..M-1``, each carrying a controlled
linear operator

    L_i^a u = -1/2 sigma^2 u'' - b u' + c u_i - l - sum_{j != i} d_ij u_j

and an intervention operator, either switching to another regime at cost
``k_ij(x)`` or an impulse ``x -> Gamma_i(x, z)`` at cost ``K_i(x, z)``.

Two sign conventions are supported.  ``orientation="max"`` is the cost
minimisation form ``max(L u, u - M u) = 0`` with ``M_i u = min(u + cost)``;
``orientation="min"`` is the reward maximisation form
``min(L u, u_i - max(u_j - cost)) = 0`` used by the two-regime switching
benchmark.  The two are related by ``u -> -u`` and ``l -> -l``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

EPS_POS = 1e-12

Array = np.ndarray


class ModelError(ValueError):
    """A coefficient or intervention function could not be evaluated or is invalid."""


class ParameterError(ValueError):
    """An argument lies outside its admissible range."""


@dataclass(frozen=True)
class CoefficientSet:
    """Per-regime coefficient callbacks, vectorised over ``x``.

    ``diffusion``, ``drift``, ``discount`` and ``reward`` are called as
    ``f(x, i, a)``; ``coupling`` as ``d(x, i, j, a)``.  ``diffusion`` returns
    the volatility sigma, not ``a = sigma^2 / 2``.
    """

    diffusion: Callable[..., Any]
    drift: Callable[..., Any]
    discount: Callable[..., Any]
    reward: Callable[..., Any]
    coupling: Callable[..., Any] | None = None
    tag: str | None = None

    def evaluate(self, name: str, x: Array, *args) -> Array:
        fn = getattr(self, name)
        x = np.asarray(x, dtype=float)
        if fn is None:
            return np.zeros_like(x)
        try:
            out = np.broadcast_to(np.asarray(fn(x, *args), dtype=float), x.shape)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise ModelError(f"coefficient '{name}' failed at regime/control {args}: {exc}") from exc
        if not np.all(np.isfinite(out)):
            raise ModelError(f"coefficient '{name}' returned non-finite values at {args}")
        return np.array(out)


@dataclass(frozen=True)
class SwitchingCosts:
    """Switching intervention ``M_i u = min_{j != i} u_j + k_ij``; ``cost(x, i, j)``."""

    cost: Callable[..., Any]

    def evaluate(self, x: Array, i: int, j: int) -> Array:
        x = np.asarray(x, dtype=float)
        if i == j:
            return np.zeros_like(x)
        try:
            out = np.broadcast_to(np.asarray(self.cost(x, i, j), dtype=float), x.shape)
        except Exception as exc:  # noqa: BLE001
            raise ModelError(f"switching cost k[{i},{j}] failed: {exc}") from exc
        return np.array(out)


@dataclass(frozen=True)
class ImpulseRule:
    """Impulse intervention over a finite candidate set.

    ``destination(x, i, z)`` and ``cost(x, i, z)`` are vectorised over ``x``;
    ``admissible(x, i, z)`` optionally masks candidates that are not in
    ``Z_i(x)``.  ``positive_costs`` requests the ``K >= kappa0 > 0`` check.
    """

    candidates: Sequence[Any]
    destination: Callable[..., Any]
    cost: Callable[..., Any]
    admissible: Callable[..., Any] | None = None
    positive_costs: bool = True

    def evaluate(self, x: Array, i: int, z: Any) -> tuple[Array, Array, Array]:
        x = np.asarray(x, dtype=float)
        try:
            dest = np.broadcast_to(np.asarray(self.destination(x, i, z), dtype=float), x.shape)
            cost = np.broadcast_to(np.asarray(self.cost(x, i, z), dtype=float), x.shape)
            if self.admissible is None:
                mask = np.ones(x.shape, dtype=bool)
            else:
                mask = np.broadcast_to(np.asarray(self.admissible(x, i, z), dtype=bool), x.shape)
        except Exception as exc:  # noqa: BLE001
            raise ModelError(f"impulse candidate {z!r} failed in regime {i}: {exc}") from exc
        return np.array(dest), np.array(cost), np.array(mask)


Intervention = SwitchingCosts | ImpulseRule


@dataclass(frozen=True)
class SwitchingProblem:
    regime_count: int
    coefficients: CoefficientSet
    intervention: Intervention | None
    control_grid: Sequence[Sequence[Any]]
    domain: tuple[float, float]
    boundary_values: Sequence[float]
    orientation: str = "max"
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime_count < 1:
            raise ModelError("regime_count must be >= 1")
        if len(self.control_grid) != self.regime_count or any(len(a) == 0 for a in self.control_grid):
            raise ModelError("control_grid needs a nonempty sample per regime")
        lo, hi = self.domain
        if not lo < hi:
            raise ModelError(f"empty domain [{lo}, {hi}]")
        if len(self.boundary_values) != self.regime_count:
            raise ModelError("one Dirichlet value per regime is required")
        if self.orientation not in ("max", "min"):
            raise ModelError(f"orientation must be 'max' or 'min', got {self.orientation!r}")

    @property
    def sign(self) -> float:
        """+1 for the max (cost) form, -1 for the min (reward) form."""
        return 1.0 if self.orientation == "max" else -1.0


@dataclass
class ValidationReport:
    passed: bool
    certified: float
    details: dict = field(default_factory=dict)


def _check_samples(problem: SwitchingProblem, x: Sequence[float]) -> Array:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = problem.domain
    if np.any(x < lo) or np.any(x > hi):
        raise ParameterError("sample points must lie inside the domain")
    return x


def validate_monotonicity(problem: SwitchingProblem, sample_points, eps_pos: float = EPS_POS) -> ValidationReport:
    """Check ``d_ij >= 0`` and ``c_i - sum_j d_ij >= lambda0 > 0`` on samples."""
    x = _check_samples(problem, sample_points)
    coef = problem.coefficients
    M = problem.regime_count
    min_margin = np.inf
    min_coupling = np.inf
    for i in range(M):
        for a in problem.control_grid[i]:
            margin = coef.evaluate("discount", x, i, a)
            for j in range(M):
                if j == i:
                    continue
                d = coef.evaluate("coupling", x, i, j, a)
                min_coupling = min(min_coupling, float(d.min()))
                margin = margin - d
            min_margin = min(min_margin, float(margin.min()))
    if M == 1:
        min_coupling = 0.0
    passed = min_margin >= eps_pos and min_coupling >= 0.0
    return ValidationReport(
        passed=passed,
        certified=min_margin,
        details={"min_margin": min_margin, "min_coupling": min_coupling},
    )


def validate_triangular_costs(rule: Intervention, sample_points, regime_count: int,
                              eps_pos: float = EPS_POS) -> ValidationReport:
    """Minimum of ``k_ij + k_jl - k_il`` over samples and triples ``j != i, l != j``."""
    if not isinstance(rule, SwitchingCosts):
        raise TypeError("triangular condition is only defined for switching costs")
    if regime_count < 2:
        raise ParameterError("triangular condition needs at least two regimes")
    x = np.atleast_1d(np.asarray(sample_points, dtype=float))
    k = [[rule.evaluate(x, i, j) for j in range(regime_count)] for i in range(regime_count)]
    kappa = np.inf
    worst = None
    for i, j, l in itertools.product(range(regime_count), repeat=3):
        if j == i or l == j:
            continue
        val = float((k[i][j] + k[j][l] - k[i][l]).min())
        if val < kappa:
            kappa, worst = val, (i, j, l)
    return ValidationReport(passed=kappa >= eps_pos, certified=kappa, details={"worst_triple": worst})


@dataclass
class Subsolution:
    """Tabulated strict subsolution ``w`` on the sample points."""

    x: Array
    values: Array  # (M, n)
    C: float
    C_prime: float
    margin: float
    required: float


def _obstacle_gap(w: Array, k: Array) -> Array:
    """``w_i - min_{j != i}(w_j + k_ij)`` for each regime and sample."""
    M = w.shape[0]
    gap = np.empty_like(w)
    for i in range(M):
        others = [w[j] + k[i, j] for j in range(M) if j != i]
        gap[i] = w[i] - np.min(others, axis=0)
    return gap


def strict_subsolution(rule: SwitchingCosts, problem: SwitchingProblem, eps: float, sample_points,
                       kappa0: float | None = None, lambda0: float | None = None) -> Subsolution:
    """Build ``w_i = -min(min_{j != i}(k_ji - eps), 0) - C`` on sorted samples.

    ``C`` is taken as ``(C' + min(eps, kappa0 - eps)) / lambda0`` where ``C'``
    bounds the (max-form) operator applied to ``-k~``, estimated with finite
    differences on the samples.  ``margin`` is the largest obstacle gap
    ``w_i - M_i w`` found, which must not exceed ``-min(eps, kappa0 - eps)``.
    """
    if not isinstance(rule, SwitchingCosts):
        raise TypeError("strict subsolution is built for switching costs only")
    x = np.sort(np.atleast_1d(np.asarray(sample_points, dtype=float)))
    M = problem.regime_count
    if kappa0 is None:
        kappa0 = validate_triangular_costs(rule, x, M).certified
    if lambda0 is None:
        lambda0 = validate_monotonicity(problem, x).certified
    if not 0.0 < eps < kappa0:
        raise ParameterError(f"eps must lie in (0, kappa0) = (0, {kappa0})")
    if lambda0 <= 0:
        raise ParameterError("problem is not monotone (lambda0 <= 0)")
    k = np.array([[rule.evaluate(x, i, j) for j in range(M)] for i in range(M)])
    ktilde = np.empty((M, x.size))
    for i in range(M):
        ktilde[i] = np.minimum(np.min([k[j, i] - eps for j in range(M) if j != i], axis=0), 0.0)
    phi = -ktilde
    # The operator is written in max form; a min-form problem has l -> -l.
    coef = problem.coefficients
    if x.size >= 3:
        d1 = np.gradient(phi, x, axis=1)
        d2 = np.gradient(d1, x, axis=1)
    else:
        d1 = d2 = np.zeros_like(phi)
    c_prime = -np.inf
    for i in range(M):
        for a in problem.control_grid[i]:
            sig = coef.evaluate("diffusion", x, i, a)
            val = (-0.5 * sig**2 * d2[i] - coef.evaluate("drift", x, i, a) * d1[i]
                   + coef.evaluate("discount", x, i, a) * phi[i]
                   - problem.sign * coef.evaluate("reward", x, i, a))
            for j in range(M):
                if j != i:
                    val = val - coef.evaluate("coupling", x, i, j, a) * phi[j]
            c_prime = max(c_prime, float(val.max()))
    required = min(eps, kappa0 - eps)
    C = max((c_prime + required) / lambda0, 0.0)
    w = phi - C
    margin = float(_obstacle_gap(w, k).max()) if M > 1 else -np.inf
    return Subsolution(x=x, values=w, C=C, C_prime=c_prime, margin=margin, required=required)


# --------------------------------------------------------------------------
# Built-in problems


def hat_reward(x: Array) -> Array:
    """``0.5 - |x - 1|`` on ``[0.5, 1.5]``, zero elsewhere."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x - 1.0) <= 0.5, 0.5 - np.abs(x - 1.0), 0.0)


def optimal_switching_problem(r: float = 0.02, mu: float = 0.06, sigma: float = 0.2, c: float = 0.125,
                              x_hi: float = 2.0, boundary: float = 0.0) -> SwitchingProblem:
    """Two-regime infinite-horizon switching benchmark (reward maximisation).

    Regime 0 holds the riskless asset, ``dX = r X dt``; regime 1 the risky one,
    ``dX = mu X dt + sigma X dW``.  Both earn the hat reward, are discounted at
    ``r``, and switching costs ``c`` either way.
    """
    nu = (0.0, 1.0)

    def diffusion(x, i, a):
        return sigma * nu[i] * x

    def drift(x, i, a):
        return (r + nu[i] * (mu - r)) * x

    coef = CoefficientSet(
        diffusion=diffusion,
        drift=drift,
        discount=lambda x, i, a: np.full_like(x, r),
        reward=lambda x, i, a: hat_reward(x),
        coupling=None,
        tag="optimal_switching",
    )
    costs = SwitchingCosts(cost=lambda x, i, j: np.full_like(x, c))
    return SwitchingProblem(
        regime_count=2,
        coefficients=coef,
        intervention=costs,
        control_grid=[[None], [None]],
        domain=(0.0, x_hi),
        boundary_values=[boundary, boundary],
        orientation="min",
        name="optimal_switching",
        params={"r": r, "mu": mu, "sigma": sigma, "c": c},
    )


def constant_problem(diffusion, drift, discount, reward, coupling=None, costs=None, impulse=None,
                     domain=(0.0, 1.0), boundary=None, orientation="max") -> SwitchingProblem:
    """Problem with x-independent coefficients, one entry per regime.

    ``costs`` is an ``(M, M)`` switching-cost matrix.  ``impulse`` is a dict
    ``{"shifts": [...], "fixed_cost": K0, "proportional_cost": k1}`` giving
    ``Gamma(x, z) = x + z`` and ``K = K0 + k1 |z|``, admissible while the
    destination stays in the domain.
    """
    sig, b, c, l = (np.asarray(v, dtype=float) for v in (diffusion, drift, discount, reward))
    M = sig.size
    d = np.zeros((M, M)) if coupling is None else np.asarray(coupling, dtype=float)
    coef = CoefficientSet(
        diffusion=lambda x, i, a: np.full_like(x, sig[i]),
        drift=lambda x, i, a: np.full_like(x, b[i]),
        discount=lambda x, i, a: np.full_like(x, c[i]),
        reward=lambda x, i, a: np.full_like(x, l[i]),
        coupling=lambda x, i, j, a: np.full_like(x, d[i, j]),
        tag="constant",
    )
    lo, hi = domain
    if costs is not None and impulse is not None:
        raise ModelError("give either switching costs or an impulse rule, not both")
    intervention: Intervention | None = None
    if costs is not None:
        k = np.asarray(costs, dtype=float)
        if k.shape != (M, M):
            raise ModelError(f"costs must be {M}x{M}")
        intervention = SwitchingCosts(cost=lambda x, i, j: np.full_like(x, k[i, j]))
    elif impulse is not None:
        K0 = float(impulse.get("fixed_cost", 0.0))
        k1 = float(impulse.get("proportional_cost", 0.0))
        intervention = ImpulseRule(
            candidates=list(impulse["shifts"]),
            destination=lambda x, i, z: x + z,
            cost=lambda x, i, z: np.full_like(x, K0 + k1 * abs(z)),
            admissible=lambda x, i, z: (x + z >= lo) & (x + z <= hi),
        )
    return SwitchingProblem(
        regime_count=M,
        coefficients=coef,
        intervention=intervention,
        control_grid=[[None]] * M,
        domain=(float(lo), float(hi)),
        boundary_values=[0.0] * M if boundary is None else list(boundary),
        orientation=orientation,
        name="constant",
    )


BUILTIN_FAMILIES = {
    "optimal_switching": optimal_switching_problem,
    "constant": constant_problem,
}


def problem_from_dict(doc: dict) -> SwitchingProblem:
    """Build a problem from a JSON-style document (see README for the schema)."""
    if not isinstance(doc, dict):
        raise ModelError("problem document must be a JSON object")
    family = doc.get("family")
    if family not in BUILTIN_FAMILIES:
        raise ModelError(f"problem.family: unknown family {family!r}; known: {sorted(BUILTIN_FAMILIES)}")
    params = dict(doc.get("params", {}))
    if family == "optimal_switching":
        if "domain" in doc:
            lo, hi = doc["domain"]
            if lo != 0.0:
                raise ModelError("problem.domain: optimal_switching is posed on [0, x_hi]")
            params["x_hi"] = hi
        if "boundary" in doc:
            bnd = doc["boundary"]
            params["boundary"] = bnd[0] if isinstance(bnd, list) else bnd
    else:
        for key in ("domain", "boundary", "orientation"):
            if key in doc:
                params[key] = doc[key]
    try:
        problem = BUILTIN_FAMILIES[family](**params)
    except TypeError as exc:
        raise ModelError(f"problem.params: {exc}") from exc
    if "regimes" in doc and doc["regimes"] != problem.regime_count:
        raise ModelError(f"problem.regimes: declared {doc['regimes']}, family gives {problem.regime_count}")
    return problem


def load_problem(path) -> SwitchingProblem:
    with open(Path(path)) as fh:
        return problem_from_dict(json.load(fh))
