import json

import numpy as np
import pytest

from srbridge.bridge import (control_field, default_times, fokker_planck_check, grad_log,
                             horizontal_velocity, load_bridge, reconstruct, static_kl,
                             transport_cost)
from srbridge.discretization import (Grid3D, ScalarField, TableSet, apply_P, gaussian_density,
                                     grid_kernel)
from srbridge.errors import EndpointMismatchError, MissingArtifactError
from srbridge.geometry import frame_arrays, make_frame
from srbridge.schrodinger import Potentials, SinkhornConfig, solve_single
from srbridge.sde import horizontal_residual

ALPHA = 0.25


@pytest.fixture(scope="module")
def grid():
    return Grid3D.from_bounds((-3, -3, -2.4), (3, 3, 2.4), (10, 10, 12))


@pytest.fixture(scope="module")
def toy(grid):
    rho_0 = gaussian_density(grid)
    rho_f = gaussian_density(grid, mean=(0.6, -0.3, 0.2), sigmas=(0.6, 0.5, 0.55))
    tables = TableSet(grid, 0.5, ALPHA)
    pot = solve_single(rho_0, rho_f, tables(1.0), SinkhornConfig(epsilon_schedule=(0.5,)))
    bridge = reconstruct(pot, rho_0, rho_f, tables, times=np.linspace(0, 1, 5))
    return rho_0, rho_f, tables, pot, bridge


def test_default_times():
    t = default_times()
    assert t.size == 17 and t[0] == 0.0 and t[-1] == 1.0
    assert np.allclose(np.diff(t), 1 / 16)


def test_constant_potential_zero_control(grid):
    phi = ScalarField(grid, np.full(grid.size, 3.7), kind="potential")
    u = control_field(phi, 0.5, make_frame("heisenberg", ALPHA))
    assert np.max(np.abs(u)) <= 1e-14


def test_linear_log_potential_control(grid):
    c, eps = 0.8, 0.3
    pts = grid.points()
    phi = ScalarField(grid, log_values=c * pts[:, 0], kind="potential")
    u = control_field(phi, eps, make_frame("heisenberg", ALPHA))
    assert np.allclose(u[:, 0], eps * c, atol=1e-12)
    assert np.allclose(u[:, 1], 0.0, atol=1e-12)


def test_grad_log_second_order_exact_on_quadratic(grid):
    pts = grid.points()
    lv = 0.3 * pts[:, 0] ** 2 - 0.2 * pts[:, 1] * pts[:, 2]
    g = grad_log(ScalarField(grid, log_values=lv, kind="potential"))
    assert np.allclose(g[:, 0], 0.6 * pts[:, 0], atol=1e-12)
    assert np.allclose(g[:, 1], -0.2 * pts[:, 2], atol=1e-12)
    assert np.allclose(g[:, 2], -0.2 * pts[:, 1], atol=1e-12)


def test_control_rejects_nonpositive(grid):
    lv = np.zeros(grid.size)
    lv[3] = -np.inf
    with pytest.raises(ValueError):
        control_field(ScalarField(grid, log_values=lv, kind="density"), 0.5, make_frame())


def test_endpoints_match(toy):
    rho_0, rho_f, _, _, bridge = toy
    w = rho_0.grid.cell_weight
    assert np.sum(np.abs(bridge.rho[0].values - rho_0.values)) * w <= 1e-3
    assert np.sum(np.abs(bridge.rho[-1].values - rho_f.values)) * w <= 1e-3
    assert max(bridge.endpoint_l1) <= 1e-3


def test_density_nonnegative_unit_mass(toy):
    bridge = toy[4]
    for r in bridge.rho:
        assert np.all(r.values >= 0)
        assert r.mass() == pytest.approx(1.0, abs=1e-12)


def test_horizontality_exact(toy):
    bridge = toy[4]
    for j in range(len(bridge.times)):
        v = horizontal_velocity(bridge, j)
        G = frame_arrays(bridge.frame, bridge.grid.points())
        assert np.max(np.abs(horizontal_residual(G, v))) == 0.0


def test_cost_and_kl_nonnegative(toy):
    rho_0, _, tables, pot, bridge = toy
    assert bridge.cost > 0
    assert bridge.kl_static >= 0
    assert transport_cost(bridge) == bridge.cost
    assert static_kl(pot, tables(1.0), rho_0, "row_normalized") >= 0


def test_zero_control_zero_cost(toy):
    bridge = toy[4]
    saved = bridge.control
    try:
        bridge.control = [np.zeros_like(u) for u in saved]
        assert transport_cost(bridge) == 0.0
    finally:
        bridge.control = saved


def test_static_kl_vanishes_for_reference_coupling(grid):
    # rho_f = P rho_0 makes phihat_0 = rho_0, phi_f = 1 an exact fixed point
    tab = TableSet(grid, 1.0, ALPHA)(1.0)
    rho_0 = gaussian_density(grid)
    pushed = apply_P(ScalarField(grid, rho_0.values, kind="potential"), tab)
    pot = Potentials(epsilon=1.0, phi_f=ScalarField(grid, np.ones(grid.size), kind="potential"),
                     phihat_0=ScalarField(grid, rho_0.values + 1e-300, kind="potential"),
                     iterations=0, hilbert_residuals=[0.0], marginal_errors=(0.0, 0.0))
    assert pushed.values.sum() > 0
    assert abs(static_kl(pot, tab, rho_0)) <= 1e-12


def test_static_kl_gibbs_on_random_potentials(grid, rng):
    tab = TableSet(grid, 1.0, ALPHA)(1.0)
    rho_0 = gaussian_density(grid)
    K = grid_kernel(grid, tab)
    for _ in range(3):
        g = rng.normal(size=grid.size)
        f = np.log(rho_0.values) - K.log_apply(g)
        pot = Potentials(epsilon=1.0, phi_f=ScalarField(grid, log_values=g, kind="potential"),
                         phihat_0=ScalarField(grid, log_values=f, kind="potential"),
                         iterations=0, hilbert_residuals=[], marginal_errors=(0.0, 0.0))
        assert static_kl(pot, tab, rho_0) >= 0


def test_endpoint_mismatch_raises(toy, grid):
    rho_0, rho_f, tables, pot, _ = toy
    other = gaussian_density(grid, mean=(-0.8, 0.5, -0.4))
    with pytest.raises(EndpointMismatchError):
        reconstruct(pot, rho_0, other, tables, times=np.linspace(0, 1, 3))


def test_times_validated(toy):
    rho_0, rho_f, tables, pot, _ = toy
    with pytest.raises(ValueError):
        reconstruct(pot, rho_0, rho_f, tables, times=[0.0, 0.6, 0.5, 1.0])


def test_save_load_roundtrip(toy, tmp_path):
    bridge = toy[4]
    bridge.save(str(tmp_path / "b"))
    summary = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert {"epsilon", "cost", "kl_static", "endpoint_l1", "mass_drift"} <= set(summary)
    assert len(summary["mass_drift"]) == len(bridge.times)
    back = load_bridge(str(tmp_path / "b"))
    assert np.array_equal(back.times, bridge.times)
    assert back.cost == bridge.cost
    for j in range(len(bridge.times)):
        assert np.array_equal(back.rho[j].values, bridge.rho[j].values)
        assert np.array_equal(back.control[j], bridge.control[j])


def test_load_missing(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_bridge(str(tmp_path / "nothing"))


def test_fokker_planck_rows(toy):
    rows = fokker_planck_check(toy[4])
    assert len(rows) == 3
    for t, lhs, rhs, rel in rows:
        assert 0 < t < 1 and np.isfinite(lhs) and np.isfinite(rhs) and rel >= 0
