import csv
import dataclasses
import json

import numpy as np
import pytest
import sympy

from sdcontrol import verify
from sdcontrol.verify import ConvergenceReport, ExactFields

PTS_S = np.array([[0.2, 1.3], [0.7, 1.8], [0.5, 1.5]])

# classical solution of the smooth octet on the coarsest mesh, degree-20 quadrature
FROZEN_COARSE = {
    "u_h1_s": 0.26286571477440623,
    "u_l2_d": 0.14151066389176084,
    "u_div_d": 0.136045944809092,
    "u_X": 0.3280733928527958,
    "z_X": 0.4258989109826634,
    "p_L2": 0.184994910984544,
    "r_L2": 0.3865024753166228,
}

# classical X-error of the quadratic octet per unit gradient-source scale
GROWTH_PER_SCALE = 1.7300111615104116e-05


def shear_octet():
    zero = ("0", "0")
    return ExactFields(("y**2", "0"), "x", zero, "0", zero, "0", zero, "0", name="shear")


def test_derived_data_by_hand():
    # -div(2 D(u)) + grad p = (-2, 0) + (1, 0); no adjoint, so the target is u
    data = verify.derive_data(shear_octet())
    assert np.allclose(data.f_s(PTS_S), [[-1.0, 0.0]] * 3, atol=1e-14)
    assert np.allclose(data.u_star_s(PTS_S), np.column_stack([PTS_S[:, 1] ** 2, 0 * PTS_S[:, 0]]))
    assert data.g_s is None and data.g_d is None and data.f_d is None
    assert data.gz_s is None and data.u_star_d is None


def test_stream_function_data():
    """u^s = curl psi with psi vanishing to second order on the Stokes boundary."""
    x, y = verify.X, verify.Y
    psi = x ** 2 * (1 - x) ** 2 * (y - 1) ** 2 * (2 - y) ** 2
    u = sympy.Matrix([sympy.diff(psi, y), -sympy.diff(psi, x)])
    zero = ("0", "0")
    exact = ExactFields(u, "0", zero, "0", zero, "0", zero, "0", mu=1.5)
    data = verify.derive_data(exact)
    assert data.g_s is None and data.g_d is None and data.gz_s is None
    res = data.state_interface
    assert res.mass is None and res.normal_stress is None
    # the tangential strain does not vanish on the interface
    assert res.slip is not None
    # f^s = -2 mu div D(u), by hand-rolled differentiation
    D = (u.jacobian([x, y]) + u.jacobian([x, y]).T) / 2
    f = -2 * 1.5 * sympy.Matrix([sympy.diff(D[i, 0], x) + sympy.diff(D[i, 1], y) for i in range(2)])
    ref = sympy.lambdify((x, y), f, "numpy")
    want = np.array([np.ravel(ref(px, py)) for px, py in PTS_S])
    assert np.allclose(data.f_s(PTS_S), want, rtol=1e-12, atol=1e-12)
    assert np.allclose(data.u_star_s(PTS_S), exact.u_s(PTS_S), atol=1e-14)


def test_zero_octet_has_no_data():
    data = verify.derive_data(verify.zero_octet())
    for name in ("f_s", "f_d", "u_star_s", "u_star_d", "g_s", "g_d", "gz_s", "gz_d"):
        assert getattr(data, name) is None
    assert data.state_interface.mass is None


@pytest.mark.parametrize("octet", sorted(verify.OCTETS))
def test_weak_residual_gate(octet):
    exact = verify.OCTETS[octet]()
    assert verify.max_weak_residual(exact, verify.make_mesh(exact, 2, 0)) < 1e-10


def test_weak_residual_detects_wrong_data(smooth, smooth_data):
    bad = dataclasses.replace(smooth_data, f_s=lambda p: smooth_data.f_s(p) + 1.0)
    res = verify.weak_residual(smooth, verify.make_mesh(smooth, 2, 0), data=bad)
    assert np.abs(res["state"]).max() > 1e-3
    assert np.abs(res["adjoint"]).max() < 1e-10


def test_pressure_shift_keeps_velocity(smooth):
    shifted = smooth.with_pressure_shift(verify.pressure_bubble(), 5.0)
    assert np.allclose(shifted.u_s(PTS_S), smooth.u_s(PTS_S))
    assert not np.allclose(shifted.p_s(PTS_S), smooth.p_s(PTS_S))


def test_error_norms_frozen(smooth, coarse):
    mesh, spaces, _ = coarse
    sol = verify.solve_exact(smooth, mesh, "classical", spaces=spaces)
    hi = verify.error_norms(sol, smooth, degree=20)
    lo = verify.error_norms(sol, smooth)
    for key, val in FROZEN_COARSE.items():
        assert hi[key] == pytest.approx(val, rel=1e-10)
        assert lo[key] == pytest.approx(val, rel=1e-5)


def test_error_norms_reject_low_quadrature(smooth, coarse):
    mesh, spaces, _ = coarse
    sol = verify.solve_exact(smooth, mesh, "classical", spaces=spaces)
    with pytest.raises(ValueError):
        verify.error_norms(sol, smooth, degree=4)


def test_error_norms_vanish_for_zero_octet(coarse):
    mesh, spaces, _ = coarse
    z = verify.zero_octet()
    err = verify.error_norms(verify.solve_exact(z, mesh, "classical", spaces=spaces), z)
    assert max(err.values()) == 0.0


def test_eoc_is_nan_at_solver_level():
    rep = ConvergenceReport("classical", "quadratic",
                            rows=[{"u_X": 1e-13}, {"u_X": 3e-14}, {"u_X": 1e-14}])
    assert all(np.isnan(rep.eoc("u_X")))


def test_eoc_of_halving_errors():
    rep = ConvergenceReport("classical", "x", rows=[{"u_X": 1.0}, {"u_X": 0.25}, {"u_X": 0.0625}])
    assert rep.eoc("u_X") == pytest.approx([2.0, 2.0])
    assert rep.last_eoc("u_X") == pytest.approx(2.0)


def test_study_needs_three_levels(smooth):
    with pytest.raises(ValueError):
        verify.convergence_study(smooth, levels=2)


def test_study_on_quadratic_octet_is_exact():
    rep = verify.convergence_study(verify.quadratic_octet(), levels=3)
    assert all(np.isnan(rep.eoc("u_X")))
    table = rep.table()
    assert len(table) == 3 and np.isnan(table[0]["eoc_u_X"])


@pytest.fixture(scope="module")
def rows():
    return verify.robustness_experiment(verify.quadratic_octet(), scales=(0.0, 1.0, 1e2, 1e4))


class TestRobustness:

    def test_baseline_is_exact(self, rows):
        assert rows[0]["classical"] < 1e-10

    def test_classical_error_proportional_to_scale(self, rows):
        for r in rows[1:]:
            assert r["classical"] == pytest.approx(GROWTH_PER_SCALE * r["scale"], rel=1e-8)

    def test_robust_velocity_invariant(self, rows):
        base = rows[0]["robust_u"]
        for r in rows[1:]:
            assert np.abs(r["robust_u"] - base).max() < 1e-8 * r["scale"]
        assert verify.robust_spread(rows) < 1e-6

    def test_growth_statistic(self, rows):
        assert verify.classical_growth(rows[1:]) == pytest.approx(1e4, rel=1e-6)


def test_gradient_source_must_have_compact_support(smooth):
    with pytest.raises(ValueError):
        verify.check_compact_support("x*(1 - x)", smooth)
    verify.check_compact_support(verify.pressure_bubble(), smooth)


def test_finite_difference_uses_genuine_control_problem():
    data = verify.control_problem_data()
    assert data.g_s is None and data.state_interface.slip is None


def test_write_csv_and_json(tmp_path):
    rows = [{"level": 0, "u_X": 0.123456789, "vec": np.zeros(2)}]
    verify.write_csv(tmp_path / "t.csv", rows)
    with open(tmp_path / "t.csv") as fh:
        got = list(csv.reader(fh))
    assert got == [["level", "u_X"], ["0", "0.123457"]]
    verify.write_json(tmp_path / "t.json", {"a": np.float64(1.5), "b": np.arange(2)})
    assert json.loads((tmp_path / "t.json").read_text()) == {"a": 1.5, "b": [0, 1]}
