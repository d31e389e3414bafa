import numpy as np
import pytest

from qvipenalty.discretize import Grid1D, assemble
from qvipenalty.model import optimal_switching_problem


@pytest.fixture(scope="session")
def benchmark_problem():
    return optimal_switching_problem(r=0.02, mu=0.06, sigma=0.2, c=0.125)


@pytest.fixture(scope="session")
def small_benchmark(benchmark_problem):
    """Benchmark on h = 2^-6 (256 unknowns)."""
    return assemble(benchmark_problem, Grid1D.from_exponent(6))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_SYSTEMS = {}


@pytest.fixture(scope="session")
def benchmark_system(benchmark_problem):
    """Cached benchmark assembly by mesh exponent."""

    def get(n):
        if n not in _SYSTEMS:
            _SYSTEMS[n] = assemble(benchmark_problem, Grid1D.from_exponent(n))
        return _SYSTEMS[n]

    return get


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})")
