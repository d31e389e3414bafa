import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracle import oracle_solve, random_system
from qvipenalty import solvers
from qvipenalty.analysis import log_linear_fit, scalar_self_impulse_system
from qvipenalty.discretize import DiscreteSystem, Grid1D, assemble
from qvipenalty.model import constant_problem, optimal_switching_problem
from qvipenalty.solvers import (
    Policy,
    StoppingCriterion,
    initial_guess_continuation_value,
    iterated_optimal_stopping,
    solve_continuation,
    solve_direct,
    solve_penalized,
    solve_per_strategy_penalty,
)


def test_criterion_defaults_and_value():
    c = StoppingCriterion()
    assert (c.tol, c.scale, c.max_iterations) == (1e-9, 1.0, 100_000)
    assert c.value(np.array([2.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(0.5)
    assert c.value(np.array([0.1]), np.array([0.0])) == pytest.approx(0.1)  # scale floor
    with pytest.raises(ValueError):
        StoppingCriterion(tol=0.0)
    with pytest.raises(ValueError):
        StoppingCriterion(scale=-1.0)


def test_continuation_value_zero_reward():
    p = constant_problem([0, 0.3], [0.1, 0.2], [1, 1], [0, 0], costs=[[0, 1], [1, 0]], domain=(0, 1))
    sys = assemble(p, Grid1D(0, 1, 1 / 16), left_boundary="neumann")
    assert np.abs(initial_guess_continuation_value(sys)).max() == 0.0


def test_continuation_value_no_spatial_operator():
    p = constant_problem([0, 0], [0, 0], [1, 1], [2.0, -0.5], costs=[[0, 1], [1, 0]], domain=(0, 1))
    sys = assemble(p, Grid1D(0, 1, 1 / 8))
    assert np.allclose(initial_guess_continuation_value(sys), np.repeat([2.0, -0.5], 8))


def test_continuation_value_matches_characteristics(benchmark_system):
    # riskless regime: r x u' = r u - l along x(t) = x e^{rt};
    # u(1) = (1/r) * int_1^1.5 (1.5 - y) / y^2 dy
    exact = (0.5 - np.log(1.5)) / 0.02
    errs = []
    for n in (9, 10, 11):
        sys = benchmark_system(n)
        u0 = initial_guess_continuation_value(sys)
        errs.append(abs(u0[sys.grid.index_of(1.0)] - exact))
    assert errs[-1] < 5e-3
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.1)


def test_penalty_zero_is_continuation_value(small_benchmark):
    rep = solve_penalized(small_benchmark, 0.0)
    assert rep.converged and rep.iterations <= 2
    assert np.allclose(rep.solution, initial_guess_continuation_value(small_benchmark), atol=1e-12)


def test_penalty_matches_oracle_on_tiny_grid():
    sys = assemble(optimal_switching_problem(), Grid1D(0.0, 2.0, 0.25))
    assert sys.nodes_per_regime == 8
    rep = solve_penalized(sys, 1e3)
    ref = oracle_solve(sys, "penalty", 1e3)
    assert rep.converged
    assert np.abs(rep.solution - ref).max() <= 1e-9


def test_penalty_iterates_monotone_and_complementary(small_benchmark):
    rep = solve_penalized(small_benchmark, 1e4, keep_iterates=True)
    s = small_benchmark.sign
    for a, b in zip(rep.iterates[:-1], rep.iterates[1:]):
        assert np.all(s * (a - b) >= -1e-12)
    assert rep.equation_residual <= 1e-8 * 1e4
    assert rep.residual_history[-1] < 1e-9


def test_penalty_never_singular_on_all_switch_start(small_benchmark):
    rep = solvers._policy_iteration(small_benchmark, "penalty", 10.0, None, StoppingCriterion(), "penalty",
                                    init_policy="all")
    assert rep.converged


def test_penalty_rejects_negative_rho(small_benchmark):
    with pytest.raises(ValueError):
        solve_penalized(small_benchmark, -1.0)


def test_max_iterations_status(small_benchmark):
    rep = solve_direct(small_benchmark, crit=StoppingCriterion(max_iterations=2))
    assert rep.status == solvers.MAX_ITERATIONS and rep.iterations == 2


def test_direct_all_switch_policy_is_singular(small_benchmark):
    rep = solve_direct(small_benchmark, init_policy=Policy.always_intervene(small_benchmark))
    assert rep.status == solvers.SINGULAR_POLICY
    assert rep.failed_iteration == 0
    rep2 = solve_direct(small_benchmark, init_policy="all")
    assert rep2.status == solvers.SINGULAR_POLICY


def test_direct_scalar_self_impulse_is_singular():
    sys = scalar_self_impulse_system(1.0, 0.5)
    rep = solve_direct(sys, init_policy="all")
    assert rep.status == solvers.SINGULAR_POLICY


def test_direct_complementarity(small_benchmark):
    rep = solve_direct(small_benchmark)
    assert rep.converged
    sys = small_benchmark
    v = sys.sign * rep.solution
    pde = sys.operators[0] @ v - sys.rewards[0]
    best = np.full(sys.size, np.inf)
    np.minimum.at(best, sys.owner, sys.G @ v + sys.K)
    assert np.abs(np.maximum(pde, v - best)).max() <= 1e-8


def test_per_strategy_equals_penalty_for_two_regimes(small_benchmark):
    a = solve_penalized(small_benchmark, 1e3)
    b = solve_per_strategy_penalty(small_benchmark, 1e3)
    assert np.abs(a.solution - b.solution).max() <= 1e-10


def test_per_strategy_three_regimes_between_direct_and_bound(rng):
    k = np.array([[0, 0.2, 0.3], [0.25, 0, 0.2], [0.3, 0.15, 0]])
    p = constant_problem([0.1, 0.2, 0.3], [0.1, 0.0, 0.2], [0.5, 0.5, 0.5], [0.2, 0.5, 0.3], costs=k,
                         domain=(0, 1), boundary=[0, 0, 0])
    sys = assemble(p, Grid1D(0, 1, 1 / 16), left_boundary="neumann")
    direct = solve_direct(sys).solution
    gaps = []
    for rho in (1e2, 1e3, 1e4):
        u = solve_per_strategy_penalty(sys, rho).solution
        d = sys.sign * (u - direct)
        assert d.min() >= -1e-12
        gaps.append(rho * d.max())
    C = max(gaps)
    assert (sys.sign * (solve_per_strategy_penalty(sys, 1e5).solution - direct)).max() <= C / 1e5 * 1.01


def test_per_strategy_zero_rho_and_impulse_rejection(small_benchmark):
    rep = solve_per_strategy_penalty(small_benchmark, 0.0)
    assert np.allclose(rep.solution, initial_guess_continuation_value(small_benchmark), atol=1e-12)
    p = constant_problem([0.0], [0.0], [1.0], [1.0], impulse={"shifts": [0.25]}, domain=(0, 1))
    with pytest.raises(ValueError):
        solve_per_strategy_penalty(assemble(p, Grid1D(0, 1, 0.125)), 10.0)


def test_continuation_single_stage_below_threshold(small_benchmark):
    rep = solve_continuation(small_benchmark, 50.0)
    assert rep.stages == [rep.iterations]
    ref = solve_penalized(small_benchmark, 100.0)
    rep100 = solve_continuation(small_benchmark, 100.0)
    assert len(rep100.stages) == 1
    assert np.array_equal(rep100.solution, ref.solution) and rep100.iterations == ref.iterations


def test_continuation_two_stages_saves_iterations(benchmark_system):
    sys = benchmark_system(14)
    rho = sys.size / 16
    assert rho == 4096
    cont = solve_continuation(sys, rho)
    single = solve_penalized(sys, rho)
    assert len(cont.stages) == 2 and sum(cont.stages) == cont.iterations
    assert cont.iterations < single.iterations
    assert np.abs(cont.solution - single.solution).max() <= 1e-8


def test_iterated_stopping_monotone_geometric(benchmark_system):
    sys = benchmark_system(8)
    seq = iterated_optimal_stopping(sys, 30)
    s = sys.sign
    for a, b in zip(seq.solutions[:-1], seq.solutions[1:]):
        assert np.all(s * (a - b) >= -1e-12)
    slope, r2 = log_linear_fit(seq.decrements)
    assert slope < 0 and r2 > 0.95
    # converges to the direct solution
    assert np.abs(seq.final - solve_direct(sys).solution).max() <= 1e-3


def test_iterated_stopping_slower_for_smaller_cost():
    rates = []
    for c in (0.125, 0.0625):
        sys = assemble(optimal_switching_problem(c=c), Grid1D.from_exponent(7))
        rates.append(log_linear_fit(iterated_optimal_stopping(sys, 30).decrements)[0])
    assert rates[1] >= rates[0]  # per-stage factor exp(slope) does not shrink


def test_iterated_stopping_penalty_inner(small_benchmark):
    seq = iterated_optimal_stopping(small_benchmark, 5, inner="penalty", rho=1e4)
    assert all(st.converged for st in seq.stages)
    with pytest.raises(ValueError):
        iterated_optimal_stopping(small_benchmark, 5, inner="penalty")
    with pytest.raises(ValueError):
        iterated_optimal_stopping(small_benchmark, 0)


def test_iterated_stopping_stage_matches_oracle(rng):
    sys = random_system(rng, "switching", M=2, L=10)
    seq = iterated_optimal_stopping(sys, 3)
    psi = sys.G @ (sys.sign * seq.solutions[2]) + sys.K
    ref = oracle_solve(sys, "direct", psi=psi)
    assert np.abs(seq.solutions[3] - ref).max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["switching", "impulse"]))
def test_policy_iteration_monotone_iterates(seed, kind):
    sys = random_system(np.random.default_rng(seed), kind, slots=1 + seed % 2)
    for rep in (solve_direct(sys, keep_iterates=True), solve_penalized(sys, 1e3, keep_iterates=True)):
        assert rep.converged
        for a, b in zip(rep.iterates[:-1], rep.iterates[1:]):
            assert np.all(sys.sign * (a - b) >= -1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["switching", "impulse"]))
def test_penalty_monotone_in_rho(seed, kind):
    sys = random_system(np.random.default_rng(seed), kind)
    prev = None
    for rho in (1.0, 10.0, 1e2, 1e3):
        u = solve_penalized(sys, rho).solution
        if prev is not None:
            # max form: larger rho pushes the solution down towards the QVI solution
            assert np.all(sys.sign * (prev - u) >= -1e-12)
        prev = u


def test_multi_control_matches_oracle(rng):
    sys = random_system(rng, "switching", M=2, L=12, slots=3)
    for mode, rho, fn in (("direct", 0.0, lambda: solve_direct(sys)),
                          ("penalty", 1e4, lambda: solve_penalized(sys, 1e4))):
        rep = fn()
        assert rep.converged
        assert np.abs(rep.solution - oracle_solve(sys, mode, rho)).max() <= 1e-8


def test_report_serialisation(tmp_path, small_benchmark):
    rep = solve_penalized(small_benchmark, 100.0)
    rep.to_json(tmp_path / "r.json", stride=4)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["status"] == "Converged" and doc["rho"] == 100.0
    assert len(doc["solution"]) == small_benchmark.size // 4
    rep.history_to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,criterion" and len(lines) == rep.iterations + 1


def test_tie_keeps_incumbent():
    # two identical candidates: the first chosen one must stay chosen
    sys = DiscreteSystem.from_arrays(np.eye(1), np.array([5.0]), regime_count=1,
                                     candidates=[(0, {}, 1.0, 0), (0, {}, 1.0, 1)], kind="impulse")
    rep = solve_direct(sys)
    assert rep.converged and rep.solution[0] == pytest.approx(1.0)
    assert rep.policy.choice[0] == 0
