import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srbridge.errors import QuadratureError
from srbridge.geometry import GroupPoint, group_inv, group_mul
from srbridge.heat_kernel import (DEFAULT_QUAD, KernelTable, QuadratureSpec, box_capture, kernel,
                                  kernel_origin, log_kernel_origin, log_unit_integral, tabulate,
                                  total_mass, unit_mass, varadhan_rate)
from srbridge.distance import sr_distance_sq

A = 0.25

# log I(A, B) from 40-digit mpmath quadrature on the real axis (frozen)
MPMATH_LOG_I = [
    (1.0, 0.8, -1.1160277404637050098),
    (0.5, 3.0, -5.382292178225434262),
    (4.0, 2.0, -5.0253023111572951212),
    (0.1, 0.05, 0.70483869922429161295),
    (2.0, 6.0, -10.271060247499370988),
    (8.0, 1.0, -8.7186720522360318503),
]


@pytest.mark.parametrize("a, b, expected", MPMATH_LOG_I)
def test_unit_integral_against_mpmath(a, b, expected):
    assert log_unit_integral([a], [b])[0] == pytest.approx(expected, abs=1e-12)


def test_unit_integral_axis_closed_form():
    # A = 0: int s/sinh(s) cos(Bs) ds = pi^2 / (4 cosh^2(pi B / 2))
    for b in (0.0, 0.7, 3.0, 40.0):
        expected = np.log(np.pi ** 2 / 4) - 2 * np.log(np.cosh(np.pi * b / 2))
        assert log_unit_integral([0.0], [b])[0] == pytest.approx(expected, rel=1e-13, abs=1e-13)


def test_unit_integral_gaussian_limit():
    # B = 0 and small A: I -> 1 - ... ; exact value at A=B=0 is pi^2/4
    assert np.exp(log_unit_integral([0.0], [0.0])[0]) == pytest.approx(np.pi ** 2 / 4, rel=1e-14)


def test_origin_value():
    assert kernel_origin(GroupPoint(0, 0, 0), 1.0, 1.0, A) == pytest.approx(0.25, rel=1e-14)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_even_in_z(x, y, z):
    v1 = log_kernel_origin(GroupPoint(x, y, z), 0.5, 1.0, A)
    v2 = log_kernel_origin(GroupPoint(x, y, -z), 0.5, 1.0, A)
    assert v1 == v2


@given(st.floats(0, 3), st.floats(0, 2 * np.pi), st.floats(-3, 3))
def test_radial_in_plane(r, th, z):
    v1 = log_kernel_origin(GroupPoint(r, 0.0, z), 0.5, 1.0, A)
    x, y = r * np.cos(th), r * np.sin(th)
    v2 = log_kernel_origin(GroupPoint(x, y, z), 0.5, 1.0, A)
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_radial_example():
    a = kernel_origin(GroupPoint(1, 0, 0.2), 0.5, 1.0, A)
    b = kernel_origin(GroupPoint(0, 1, 0.2), 0.5, 1.0, A)
    assert a == b


def test_positive_far_out():
    for q in [(6, 0, 0), (0, 0, 9), (5, 5, 30), (0.01, 0, 20)]:
        assert log_kernel_origin(GroupPoint(*q), 0.01, 1.0, A) > -np.inf
        assert np.isfinite(log_kernel_origin(GroupPoint(*q), 0.01, 1.0, A))


def test_determinism():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 10, 500), rng.uniform(0, 30, 500)
    assert np.array_equal(log_unit_integral(a, b), log_unit_integral(a, b))


def test_identity_base_point():
    q = GroupPoint(0.4, -0.3, 0.25)
    assert kernel(GroupPoint(0, 0, 0), q, 0.5, 1.0, A) == kernel_origin(q, 0.5, 1.0, A)


def test_left_invariance(rng):
    for _ in range(10):
        g, q0, q = (GroupPoint.from_array(v) for v in rng.uniform(-1.5, 1.5, (3, 3)))
        v1 = kernel(group_mul(g, q0, A), group_mul(g, q, A), 0.5, 1.0, A)
        v2 = kernel(q0, q, 0.5, 1.0, A)
        assert v1 == pytest.approx(v2, rel=1e-12)


def test_symmetric_in_arguments(rng):
    for _ in range(10):
        q0, q = (GroupPoint.from_array(v) for v in rng.uniform(-1.5, 1.5, (2, 3)))
        assert kernel(q0, q, 0.5, 1.0, A) == pytest.approx(kernel(q, q0, 0.5, 1.0, A), rel=1e-12)


def test_levy_kernel_is_probability_density():
    # the total mass is exactly one; the numerical integral is within 1e-6
    assert unit_mass(A) == pytest.approx(1.0, abs=1e-6)
    assert total_mass(0.3, A) == pytest.approx(1.0, abs=1e-6)


def test_literal_constant_mass():
    # the alternative constants integrate to 1 / (2 a (eps t)^2)
    for et in (1.0, 0.5):
        assert total_mass(et, A, "literal") == pytest.approx(1 / (2 * A * et * et) * unit_mass(
            A, "literal") / (1 / (2 * A)), rel=1e-12)
    assert unit_mass(A, "literal") == pytest.approx(1 / (2 * A), rel=1e-5)


def test_box_capture_limits():
    assert box_capture(50.0, 50.0, 1.0, A) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 < box_capture(1.0, 0.5, 1.0, A) < 1.0


@pytest.fixture(scope="module")
def table():
    return tabulate(0.5, 1.0, A, 4.0, 3.0, n_rho=64, n_z=64)


def test_table_node_lookup_exact(table):
    i, j = 17, 23
    rho, z = table.rho_axis[i], table.ztilde_axis[j]
    direct = log_kernel_origin(GroupPoint(rho, 0.0, z), 0.5, 1.0, A)
    assert table.lookup_log(rho, z, renormalized=False) == pytest.approx(direct, abs=1e-12)


def test_table_midpoint_lookup(rng):
    fine = tabulate(0.5, 1.0, A, 4.0, 3.0)
    i = rng.integers(0, fine.rho_axis.size - 1, 100)
    j = rng.integers(0, fine.ztilde_axis.size - 1, 100)
    rho = 0.5 * (fine.rho_axis[i] + fine.rho_axis[i + 1])
    z = 0.5 * (fine.ztilde_axis[j] + fine.ztilde_axis[j + 1])
    looked = fine.lookup(rho, z, renormalized=False)
    direct = np.array([kernel_origin(GroupPoint(r, 0, zz), 0.5, 1.0, A) for r, zz in zip(rho, z)])
    assert np.max(np.abs(looked / direct - 1)) <= 0.01


def test_table_positive_and_renorm(table):
    assert np.all(table.values > 0)
    assert 0.5 <= table.renorm <= 2.0


def test_table_clamps_and_counts(table):
    before = table.clamp_count
    table.lookup(np.array([10.0]), np.array([0.0]))
    assert table.clamp_count > before


def test_table_roundtrip(table, tmp_path):
    table.save(str(tmp_path / "tab"))
    assert (tmp_path / "tab" / "meta.json").exists()
    raw = np.fromfile(tmp_path / "tab" / "values.f64le", dtype="<f8")
    assert np.array_equal(raw, table.values.ravel())
    back = KernelTable.load(str(tmp_path / "tab"))
    assert np.array_equal(back.log_values, table.log_values)
    assert back.renorm == table.renorm


def test_renormalized_mass_in_box():
    # box captures essentially all mass at eps t = 0.5 with these extents
    tab = tabulate(0.5, 1.0, A, 6.0, 5.0, n_rho=256, n_z=256)
    inner = 2.0 * np.trapezoid(tab.values * tab.renorm, tab.ztilde_axis, axis=1)
    mass = np.trapezoid(2 * np.pi * tab.rho_axis * inner, tab.rho_axis)
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_tabulate_validation():
    with pytest.raises(ValueError):
        tabulate(0.5, 1.0, A, 4.0, 3.0, n_rho=4, n_z=64)
    with pytest.raises(ValueError):
        tabulate(-0.5, 1.0, A, 4.0, 3.0)


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(nodes_per_panel=2)
    with pytest.raises(ValueError):
        QuadratureSpec(rel_tol=0.0)


def test_panel_cap_surfaces_quadrature_error():
    with pytest.raises(QuadratureError):
        log_unit_integral([3.0], [50.0], QuadratureSpec(max_panels=1))


def test_varadhan_planar_unit_offset():
    q = GroupPoint(1, 0, 0)
    rate = varadhan_rate(q, 1.0, 0.02, A)
    assert sr_distance_sq(GroupPoint(0, 0, 0), q, A) == pytest.approx(1.0, abs=1e-12)
    assert abs(rate - 1.0) <= 0.10


def test_varadhan_even_in_z():
    a = varadhan_rate(GroupPoint(0.5, 0.2, 0.7), 1.0, 0.1, A)
    b = varadhan_rate(GroupPoint(0.5, 0.2, -0.7), 1.0, 0.1, A)
    assert a == b


def test_varadhan_monotone_at_planar_probes():
    o = GroupPoint(0, 0, 0)
    for q in [GroupPoint(1.5, 0, 0), GroupPoint(0, 2.0, 0), GroupPoint(3.0, 0, 0)]:
        d2 = sr_distance_sq(o, q, A)
        errs = [abs(varadhan_rate(q, 1.0, e, A) - d2) / d2 for e in (0.5, 0.1, 0.02)]
        assert errs[0] > errs[1] > errs[2]


def test_varadhan_vertical_axis_picks_geodesic_constant():
    # the small-noise rate on the axis tends to pi |z| / a, not 2 pi a |z|
    q = GroupPoint(0, 0, 0.5)
    geo = sr_distance_sq(GroupPoint(0, 0, 0), q, A)
    alt = sr_distance_sq(GroupPoint(0, 0, 0), q, A, convention="literal")
    rates = [varadhan_rate(q, 1.0, e, A) for e in (0.1, 0.02, 0.005)]
    assert rates[0] < rates[1] < rates[2] < geo
    assert abs(rates[-1] - geo) / geo <= 0.02
    assert abs(rates[-1] - alt) / alt > 1.0


def test_default_quadrature_is_frozen():
    assert DEFAULT_QUAD == QuadratureSpec()


def test_group_inverse_consistency():
    q0 = GroupPoint(0.3, -0.4, 0.1)
    q = GroupPoint(-0.2, 0.5, 0.6)
    off = group_mul(group_inv(q0), q, A)
    assert kernel(q0, q, 0.5, 1.0, A) == kernel_origin(off, 0.5, 1.0, A)
