"""Shared fixtures.

The default Gaussian-to-ring problem is expensive (a full annealed solve
plus four bridge reconstructions), so it is computed once per session and
shared by the acceptance suite and the slow module examples.
"""

from __future__ import annotations

import logging
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from srbridge import _backend
from srbridge.bridge import reconstruct
from srbridge.discretization import TableSet, default_grid, gaussian_density, ring_density
from srbridge.schrodinger import SinkhornConfig, solve_schrodinger, solve_single

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ALPHA = 0.25
SCHEDULE = (1.0, 0.5, 0.1, 0.01)

# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session", autouse=True)
def _use_all_cores():
    _backend.set_threads(0)
    logging.getLogger("srbridge").setLevel(logging.ERROR)
    yield


class DefaultProblem:
    """Grid, boundary densities and per-noise table sets for the default run."""

    def __init__(self):
        self.grid = default_grid()
        self.rho_0 = gaussian_density(self.grid)
        self.rho_f = ring_density(self.grid)
        self.tables = {eps: TableSet(self.grid, eps, ALPHA) for eps in SCHEDULE}
        self.config = SinkhornConfig(epsilon_schedule=SCHEDULE)
        self._warm = None
        self._bridges: dict = {}
        self._cold: dict = {}
        self.timings: dict = {}

    def horizon_table(self, eps):
        return self.tables[eps](1.0)

    @property
    def warm(self):
        """Annealed solve over the whole schedule (warm starts as configured)."""
        if self._warm is None:
            t0 = time.perf_counter()
            tabs = [self.horizon_table(e) for e in SCHEDULE]
            self._warm = {p.epsilon: p for p in
                          solve_schrodinger(self.rho_0, self.rho_f, self.config, tabs)}
            self.timings["annealed_solve"] = time.perf_counter() - t0
        return self._warm

    def cold(self, eps):
        if eps not in self._cold:
            self._cold[eps] = solve_single(self.rho_0, self.rho_f, self.horizon_table(eps),
                                           self.config)
        return self._cold[eps]

    def bridge(self, eps):
        if eps not in self._bridges:
            t0 = time.perf_counter()
            self._bridges[eps] = reconstruct(self.warm[eps], self.rho_0, self.rho_f,
                                             self.tables[eps], check=False)
            self.timings[f"bridge_{eps:g}"] = time.perf_counter() - t0
        return self._bridges[eps]


@pytest.fixture(scope="session")
def default_problem():
    return DefaultProblem()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
