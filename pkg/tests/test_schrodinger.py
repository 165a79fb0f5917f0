import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from srbridge.discretization import Grid3D, ScalarField, gaussian_density, table_for_grid
from srbridge.errors import ConvergenceError, DivisionUnderflowError
from srbridge.schrodinger import (SinkhornConfig, _half_steps, hilbert_metric, sinkhorn_step,
                                  solve_schrodinger, solve_single, warm_start_potential)

positive = st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=12)


def test_hilbert_examples():
    assert hilbert_metric([1.0, 2.0], [2.0, 1.0]) == pytest.approx(np.log(4.0), rel=1e-15)
    assert hilbert_metric([3.0, 1.0, 0.5], [3.0, 1.0, 0.5]) == 0.0


@given(positive, st.floats(1e-3, 1e3))
def test_hilbert_projective_invariance(u, c):
    u = np.array(u)
    v = u[::-1].copy()
    assert hilbert_metric(c * u, v) == pytest.approx(hilbert_metric(u, v), abs=1e-12)
    assert hilbert_metric(u, u) == 0.0


def test_hilbert_rejects_nonpositive():
    with pytest.raises(ValueError):
        hilbert_metric([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        hilbert_metric([1.0, -2.0], [1.0, 1.0])


class _TwoPoint:
    """Symmetric doubly stochastic 2x2 kernel exposing ``log_apply``."""

    def __init__(self, p=0.7):
        self.logK = np.log(np.array([[p, 1 - p], [1 - p, p]]))

    def log_apply(self, lf, transpose=False):
        K = self.logK.T if transpose else self.logK
        return logsumexp(K + lf[None, :], axis=1)


def test_two_point_constant_fixed_point():
    K = _TwoPoint()
    a = b = np.log([0.5, 0.5])
    f, g = _half_steps(K, np.zeros(2), a, b)
    assert np.allclose(g - g[0], 0.0, atol=1e-15)
    assert np.allclose(f - f[0], 0.0, atol=1e-15)
    f2, g2 = _half_steps(K, g, a, b)
    assert np.allclose(g2, g, atol=1e-15)


def test_two_point_nontrivial_marginals():
    K = _TwoPoint(0.8)
    a, b = np.log([0.3, 0.7]), np.log([0.6, 0.4])
    g = np.zeros(2)
    for _ in range(200):
        f, g = _half_steps(K, g, a, b)
    pi = np.exp(f[:, None] + K.logK + g[None, :])
    assert np.allclose(pi.sum(axis=1), [0.3, 0.7], atol=1e-12)
    assert np.allclose(pi.sum(axis=0), [0.6, 0.4], atol=1e-12)


def test_underflow_raises():
    K = _TwoPoint()
    with pytest.raises(DivisionUnderflowError):
        _half_steps(K, np.array([-800.0, -800.0]), np.zeros(2), np.zeros(2))


def test_config_validation():
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon_schedule=(0.5, 1.0))
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon_schedule=(1.0, 0.0))
    with pytest.raises(ValueError):
        SinkhornConfig(tol=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(method="newton")
    assert SinkhornConfig().epsilon_schedule == (1.0, 0.5, 0.1, 0.01)


# -- small grid problems ---------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    g = Grid3D.from_bounds((-3, -3, -2.4), (3, 3, 2.4), (10, 10, 12))
    rho_0 = gaussian_density(g)
    rho_f = gaussian_density(g, mean=(0.6, -0.3, 0.2), sigmas=(0.6, 0.5, 0.55))
    tabs = {e: table_for_grid(g, 1.0, e, 0.25) for e in (1.0, 0.5)}
    return g, rho_0, rho_f, tabs


def test_step_keeps_positivity(toy):
    g, rho_0, rho_f, tabs = toy
    phi = ScalarField(g, np.ones(g.size), kind="potential")
    for _ in range(3):
        hat, phi = sinkhorn_step(phi, rho_0, rho_f, tabs[1.0])
        assert np.all(np.isfinite(hat.log_values)) and np.all(np.isfinite(phi.log_values))


def test_single_level_marginals(toy):
    g, rho_0, rho_f, tabs = toy
    pot = solve_single(rho_0, rho_f, tabs[1.0], SinkhornConfig(epsilon_schedule=(1.0,)))
    assert pot.converged
    assert pot.final_residual <= 1e-8
    assert max(pot.marginal_errors) <= 1e-6
    # the rescaled potential has grid maximum one
    assert np.max(pot.phi_f.log_values) <= 1e-9


def test_contraction_is_geometric(toy):
    g, rho_0, rho_f, tabs = toy
    pot = solve_single(rho_0, rho_f, tabs[1.0], SinkhornConfig(epsilon_schedule=(1.0,),
                                                               method="log"))
    r = np.asarray(pot.hilbert_residuals)
    q = r[1:] / r[:-1]
    tail = q[len(q) // 2:]
    assert np.all(tail < 1.0)
    assert np.ptp(tail) <= 0.1
    assert np.all(np.diff(r[10:]) <= 0)


def test_engines_agree(toy):
    g, rho_0, rho_f, tabs = toy
    out = {}
    for m in ("log", "dense", "sparse"):
        out[m] = solve_single(rho_0, rho_f, tabs[0.5],
                              SinkhornConfig(epsilon_schedule=(0.5,), method=m))
    ref = out["log"].phi_f.log_values
    for m in ("dense", "sparse"):
        assert out[m].converged
        d = out[m].phi_f.log_values - ref
        assert np.ptp(d) <= 1e-6


def test_symmetric_problem_self_adjoint(toy):
    g, rho_0, _, tabs = toy
    pot = solve_single(rho_0, rho_0, tabs[1.0], SinkhornConfig(epsilon_schedule=(1.0,)))
    d = pot.phi_f.log_values - pot.phihat_0.log_values
    assert np.ptp(d) <= 1e-7


def test_anneal_and_warm_start(toy):
    g, rho_0, rho_f, tabs = toy
    cfg = SinkhornConfig(epsilon_schedule=(1.0, 0.5))
    pots = solve_schrodinger(rho_0, rho_f, cfg, tabs)
    assert [p.epsilon for p in pots] == [1.0, 0.5]
    assert not pots[0].warm_started and pots[1].warm_started
    assert np.array_equal(warm_start_potential(pots[0], 0.5), pots[0].phi_f.log_values)
    scaled = warm_start_potential(pots[0], 0.5, "scaled")
    assert np.allclose(scaled, 2.0 * pots[0].phi_f.log_values)


def test_nonconvergence_keeps_completed(toy):
    g, rho_0, rho_f, tabs = toy
    cfg = SinkhornConfig(epsilon_schedule=(1.0, 0.5), max_iters=3)
    with pytest.raises(ConvergenceError) as info:
        solve_schrodinger(rho_0, rho_f, cfg, tabs)
    assert len(info.value.completed) == 1
    assert len(info.value.residuals) == 3


def test_table_mismatch_rejected(toy):
    g, rho_0, rho_f, tabs = toy
    with pytest.raises(ValueError):
        solve_schrodinger(rho_0, rho_f, SinkhornConfig(epsilon_schedule=(1.0, 0.5)),
                          [tabs[0.5], tabs[1.0]])


def test_deterministic(toy):
    g, rho_0, rho_f, tabs = toy
    cfg = SinkhornConfig(epsilon_schedule=(0.5,))
    a = solve_single(rho_0, rho_f, tabs[0.5], cfg)
    b = solve_single(rho_0, rho_f, tabs[0.5], cfg)
    assert np.array_equal(a.phi_f.log_values, b.phi_f.log_values)
    assert a.hilbert_residuals == b.hilbert_residuals
