"""Module examples that need the full default Gaussian-to-ring solve.

These share the session fixture with the acceptance suite, so running both
in one session costs a single annealed solve.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from srbridge.bridge import bridge_at, fokker_planck_check
from srbridge.distance import hopf_lax
from srbridge.geometry import GroupPoint

from conftest import ALPHA, SCHEDULE

pytestmark = pytest.mark.slow

HOPF_LAX_PROBES = [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (0.0, -0.8, 0.1), (1.0, 1.0, 0.0),
                   (-1.2, 0.4, -0.2), (1.5, -0.5, 0.3), (-0.6, -1.4, 0.0), (2.0, 0.0, -0.1),
                   (0.3, 0.3, 0.5), (-1.8, -0.9, 0.2)]


def test_contraction_factor_geometric_at_eps1(default_problem):
    pot = default_problem.cold(1.0)
    c = pot.contraction_factors()
    tail = c[len(c) // 2:]
    assert np.all(tail < 1.0)
    # geometric convergence: tail ratios stay within a factor of two
    assert np.max(tail) / np.min(tail) <= 2.0


def test_residuals_nonincreasing_after_burn_in(default_problem):
    for eps, pot in default_problem.warm.items():
        r = np.asarray(pot.hilbert_residuals)
        assert np.all(np.diff(r[10:]) <= 0), eps


@pytest.mark.parametrize("eps", SCHEDULE)
def test_interior_mass_at_half_horizon(default_problem, eps):
    b = default_problem.bridge(eps)
    j = bridge_at(b, 0.5 * b.t_f)
    assert abs(b.mass_raw[j] - 1.0) <= 1e-3


def test_fokker_planck_mid_times(default_problem):
    b = default_problem.bridge(0.5)
    mids = [j for j, t in enumerate(b.times) if 0.25 <= t <= 0.75]
    rows = fokker_planck_check(b, samples=mids)
    assert max(r[3] for r in rows) <= 0.05, rows


def test_hopf_lax_matches_small_noise_potential(default_problem):
    eps = 0.01
    b = default_problem.bridge(eps)
    j = bridge_at(b, 0.5)
    t = float(b.times[j])
    grid = b.grid
    # the terminal value function can take either sign, so no ScalarField here
    Phi_f = SimpleNamespace(grid=grid, values=-eps * b.log_phi[-1])
    pts = grid.points()
    errs = []
    for p in HOPF_LAX_PROBES:
        # compare at the node nearest the probe, where -eps log phi is sampled
        k = int(np.argmin(np.sum((pts - p) ** 2, axis=1)))
        ref = hopf_lax(Phi_f, t, GroupPoint(*pts[k]), ALPHA)
        got = -eps * b.log_phi[j][k]
        errs.append(abs(got - ref) / abs(ref))
    assert max(errs) <= 0.15, errs
