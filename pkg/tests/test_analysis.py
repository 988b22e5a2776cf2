import json

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import gammaln

from lrtfim.analysis import (
    BinderCurve,
    anchor_temperature,
    assemble_phase_diagram,
    binder_from_moments,
    collapse_coordinates,
    collapse_quality,
    extrapolate_tc,
    find_crossing,
    mean_field_tc,
    scaling_fit,
    spread_metric,
)
from lrtfim.ensembles import EnsembleResult
from lrtfim.errors import FitError, InvalidParameterError


def curie_weiss_u4(L, T):
    """Exact Binder cumulant of the all-to-all chain (J_ij = 1/L) from a magnetization-sector sum."""
    n_up = np.arange(L + 1)
    M = 2 * n_up - L
    E = -(M**2 - L) / (2 * L)
    logw = gammaln(L + 1) - gammaln(n_up + 1) - gammaln(L - n_up + 1) - E / T
    w = np.exp(logw - logw.max())
    m = M / L
    m2, m4 = w @ m**2 / w.sum(), w @ m**4 / w.sum()
    return 1 - m4 / (3 * m2**2)


def test_binder_limits():
    assert binder_from_moments(1.0, 3.0) == pytest.approx(0.0)  # Gaussian
    assert binder_from_moments(0.25, 0.0625) == pytest.approx(2 / 3)  # two delta peaks
    with pytest.raises(InvalidParameterError):
        binder_from_moments(0.0, 1.0)


def test_curve_flags_out_of_bounds():
    c = BinderCurve(8, [1.0, 0.5, 2.0], [0.5, 0.9, -0.2], [0.01, 0.01, 0.01])
    np.testing.assert_array_equal(c.control, [0.5, 1.0, 2.0])
    np.testing.assert_array_equal(c.out_of_bounds(), [True, False, True])


def test_crossing_of_exact_curie_weiss_curves():
    T = np.linspace(0.8, 1.1, 31)
    a = BinderCurve(16, T, [curie_weiss_u4(16, t) for t in T], np.zeros(T.size))
    b = BinderCurve(32, T, [curie_weiss_u4(32, t) for t in T], np.zeros(T.size))
    exact = brentq(lambda t: curie_weiss_u4(16, t) - curie_weiss_u4(32, t), 0.85, 1.0)
    c = find_crossing(a, b, n_resample=20)
    assert c.ok and c.T == pytest.approx(exact, abs=2e-4)
    assert c.L_small == 16


def test_crossing_is_argument_order_independent():
    T = np.linspace(0.0, 2.0, 11)
    a = BinderCurve(8, T, 0.5 - 0.2 * (T - 1.1), 0.01)
    b = BinderCurve(16, T, 0.5 - 0.4 * (T - 1.1), 0.01)
    c1, c2 = find_crossing(a, b), find_crossing(b, a)
    assert c1 == c2
    assert c1.T == pytest.approx(1.1, abs=1e-5)
    # error from Gaussian resampling: sigma_T ~ sqrt(2) * 0.01 / |slope difference|
    assert c1.err == pytest.approx(np.sqrt(2) * 0.01 / 0.2, rel=0.4)


def test_no_crossing_and_degenerate():
    T = np.linspace(0.5, 1.5, 6)
    a = BinderCurve(8, T, 0.6 - 0.1 * T, 0.01)
    b = BinderCurve(16, T, 0.5 - 0.1 * T, 0.01)
    assert find_crossing(a, b).status == "no-crossing"
    far = BinderCurve(16, T + 5, 0.5 - 0.1 * T, 0.01)
    assert find_crossing(a, far).status == "no-crossing"
    same = BinderCurve(16, T, 0.6 - 0.1 * T, 0.01)
    assert find_crossing(a, same).status == "degenerate"


def test_extrapolation_exact_line():
    pts = [(L, 1.0 - 2.0 / L, 0.001) for L in (16, 32, 64)]
    tc = extrapolate_tc(pts)
    assert tc.Tc == pytest.approx(1.0, abs=1e-12)
    assert tc.slope == pytest.approx(-2.0, abs=1e-10)
    assert tc.err_sys == pytest.approx(0.0, abs=1e-12)
    two = extrapolate_tc(pts[:2])
    assert two.err_sys == 0.0 and two.Tc == pytest.approx(1.0)
    with pytest.raises(InvalidParameterError):
        extrapolate_tc(pts[:1])


def test_extrapolation_on_curie_weiss_crossings():
    sizes = (16, 32, 64, 128)
    pts = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        t = brentq(lambda x: curie_weiss_u4(a, x) - curie_weiss_u4(b, x), 0.85, 1.05)
        pts.append((a, t, 0.001))
    assert extrapolate_tc(pts).Tc == pytest.approx(1.0, abs=0.01)


def planted(Ls, Tc=1.2, a=-0.8, omega=0.9, theta=0.6, b=0.45, c=-0.3, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    Ls = np.asarray(Ls, float)
    T = Tc * (1 + a * Ls ** (-omega - theta)) * (1 + noise * rng.standard_normal(Ls.size))
    U = (b + c * Ls ** (-omega)) * (1 + noise * rng.standard_normal(Ls.size))
    return T, U


def test_scaling_fit_noiseless_recovery():
    Ls = [8, 16, 32, 64, 128, 256]
    T, U = planted(Ls)
    fit = scaling_fit(Ls, T, U)
    assert fit.Tc == pytest.approx(1.2, rel=1e-6)
    assert fit.omega == pytest.approx(0.9, rel=1e-5)
    assert fit.theta_t == pytest.approx(0.6, rel=1e-5)
    assert fit.dof_binder == 3 and "Tc" in fit.errors


def test_scaling_fit_zero_dof_flag():
    Ls = [16, 32, 64]
    T, U = planted(Ls)
    fit = scaling_fit(Ls, T, U)
    assert fit.dof_tc == 0 and fit.errors == {}
    assert fit.as_dict()["zero_dof"] is True
    with pytest.raises(InvalidParameterError):
        scaling_fit(Ls[:2], T[:2], U[:2])


def test_collapse_of_planted_scaling_function():
    Ls = [16, 32, 64, 128]
    T_c, U_c = planted(Ls)
    fit = scaling_fit(Ls, T_c, U_c)
    curves = []
    for L in Ls:
        T = np.linspace(0.9, 1.5, 25)
        x = (T - fit.tc_of_L(L)) * L**fit.theta_t
        curves.append(BinderCurve(L, T, 0.45 * np.exp(-np.maximum(x, -3) / 4) / (1 + np.exp(x / 3)), 0.01))
    raw, col = collapse_quality(curves, fit)
    assert col < 1e-3 < raw


def test_spread_metric():
    x = np.linspace(0, 1, 10)
    assert spread_metric([x, x], [x, x]) == 0.0
    assert spread_metric([x, x], [x, x + 1]) == pytest.approx(0.5)
    with pytest.raises(InvalidParameterError):
        spread_metric([x, x + 5], [x, x])


def test_mean_field_tc():
    assert mean_field_tc(0.0) == 1.0
    assert mean_field_tc(1.0) == 0.0 and mean_field_tc(1.5) == 0.0
    for g in (0.1, 0.5, 0.9):
        T = mean_field_tc(g)
        # self-consistency tanh(g/T) = g at the transition
        assert np.tanh(g / T) == pytest.approx(g, rel=1e-12)
    gs = np.linspace(0, 0.99, 20)
    assert np.all(np.diff([mean_field_tc(g) for g in gs]) < 0)


def _results(gs, eps, tag="canonical"):
    return [EnsembleResult(e, o, e * g + (o == "sz"), tag, {"g": g}) for g in gs for e in eps for o in ("sx2", "sz")]


def test_phase_diagram_assembly(tmp_path):
    gs, eps = [0.1, 0.3], [-0.4, -0.2, 0.0]
    res = [r for r in _results(gs, eps) if not (r.params["g"] == 0.3 and r.energy_density == -0.4)]
    grid = assemble_phase_diagram(
        res, critical={0.1: (1.0, 0.02)}, eps_min={0.1: -0.45, 0.3: -0.35},
        energy_of_T={0.1: lambda T: -0.5 + 0.3 * T})
    assert grid.values["sx2"].shape == (3, 2)
    assert grid.absent.tolist() == [[False, True], [False, False], [False, False]]
    assert np.isnan(grid.values["sx2"][0, 1])
    assert grid.values["sx2"][1, 0] == pytest.approx(-0.02)
    line = grid.critical_line[0]
    assert line["eps_c"] == pytest.approx(-0.2) and line["eps_c_err"] == pytest.approx(0.006)
    grid.to_json(tmp_path / "pd.json")
    data = json.loads((tmp_path / "pd.json").read_text())
    assert data["values"]["sx2"][0][1] is None and data["tag"] == "small-L estimate"
    grid.to_csv(tmp_path / "pd.csv")
    grid.critical_line_csv(tmp_path / "cl.csv")
    assert (tmp_path / "cl.csv").read_text().splitlines()[0] == "# schema-version: 1"


def test_phase_diagram_errors():
    gs, eps = [0.1, 0.3], [-0.4, 0.0]
    res = _results(gs, eps)
    with pytest.raises(InvalidParameterError, match="ragged"):
        assemble_phase_diagram(res[1:])
    with pytest.raises(InvalidParameterError, match="mixed"):
        assemble_phase_diagram(res + _results([0.5], [0.0], "microcanonical"))
    with pytest.raises(InvalidParameterError):
        assemble_phase_diagram([])


def test_anchor_temperature_picks_nearest_root():
    T = np.linspace(0.0, 4.0, 81)
    c = BinderCurve(8, T, np.cos(np.pi * T / 2), 0.01)  # equals 0 at T = 1 and T = 3
    assert anchor_temperature(c, 0.0, near=0.8) == pytest.approx(1.0, abs=1e-4)
    assert anchor_temperature(c, 0.0, near=3.3) == pytest.approx(3.0, abs=1e-4)
    with pytest.raises(FitError):
        anchor_temperature(c, 2.0, near=1.0)


def test_anchored_collapse_removes_crossing_drift():
    """Curves that cross at size-dependent values collapse once anchored at a common U*."""
    Ls = [16, 32, 64, 128]
    T_c, U_c = planted(Ls)
    fit = scaling_fit(Ls, T_c, U_c)
    T = np.linspace(0.9, 1.5, 41)
    curves = [BinderCurve(L, T, 0.4 - np.tanh((T - 1.1) * L**0.6 / 4) / 4 + 0.3 / L, 0.01) for L in Ls]
    raw, col = collapse_quality(curves, fit)
    assert col < 1e-3 < raw
    x = [collapse_coordinates(c, fit) for c in curves]
    assert all(np.ptp(xi) > 1 for xi in x)
