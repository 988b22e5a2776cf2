"""Criticality toolchain: Binder cumulants, crossings, extrapolation, scaling fits, phase diagrams."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import least_squares

from .csvio import write_csv, write_json
from .errors import FitError, InvalidParameterError

log = logging.getLogger(__name__)

CROSSING_TOL = 1e-5
N_RESAMPLE = 200


def binder_from_moments(m2, m4):
    """U4 = 1 - m4 / (3 m2^2)."""
    m2 = np.asarray(m2, dtype=float)
    if np.any(m2 <= 0):
        raise InvalidParameterError("second moment must be positive")
    out = 1 - np.asarray(m4, dtype=float) / (3 * m2**2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BinderCurve:
    L: int
    control: np.ndarray
    u4: np.ndarray
    err: np.ndarray
    source: str = "monte-carlo"

    def __post_init__(self):
        c = np.asarray(self.control, float)
        order = np.argsort(c)
        object.__setattr__(self, "control", c[order])
        object.__setattr__(self, "u4", np.asarray(self.u4, float)[order])
        object.__setattr__(self, "err", np.broadcast_to(np.asarray(self.err, float), c.shape)[order].copy())
        if np.unique(c).size != c.size:
            raise InvalidParameterError("control values must be distinct")

    def out_of_bounds(self) -> np.ndarray:
        """Points violating 0 <= U4 <= 2/3 by more than 3 error bars (flagged, not fatal)."""
        return (self.u4 < -3 * self.err) | (self.u4 > 2 / 3 + 3 * self.err)


@dataclass(frozen=True)
class Crossing:
    T: float
    err: float
    status: str  # "ok", "no-crossing", "degenerate"
    u4: float = float("nan")
    L_small: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _bisect(f, lo, hi, tol=CROSSING_TOL):
    f_lo = f(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _root(cA, uA, cB, uB, lo, hi):
    """Most significant sign change of pchip(A) - pchip(B) on [lo, hi], or None."""
    fa, fb = PchipInterpolator(cA, uA), PchipInterpolator(cB, uB)

    def diff(x):
        return float(fa(x) - fb(x))

    grid = np.linspace(lo, hi, 801)
    d = fa(grid) - fb(grid)
    sgn = np.sign(d)
    changes = np.flatnonzero(sgn[:-1] * sgn[1:] < 0)
    zeros = np.flatnonzero(sgn == 0)
    if changes.size == 0 and zeros.size == 0:
        return None
    if changes.size == 0:
        return float(grid[zeros[0]])
    # rank each sign change by the largest |difference| on either side, up to the neighbours
    bounds = np.concatenate([[0], changes + 1, [grid.size]])
    amp = [np.abs(d[bounds[k]:bounds[k + 1]]).max() for k in range(bounds.size - 1)]
    score = [min(amp[k], amp[k + 1]) for k in range(changes.size)]
    k = changes[int(np.argmax(score))]
    return _bisect(diff, grid[k], grid[k + 1])


def find_crossing(curveA: BinderCurve, curveB: BinderCurve, n_resample: int = N_RESAMPLE,
                  seed: int = 0) -> Crossing:
    """Crossing of two Binder curves by monotone cubic interpolation and bisection.

    The error is the spread over ``n_resample`` Gaussian resamplings of both curves
    within their error bars. Arguments are put in a canonical order first, so the
    result does not depend on which curve is passed first.
    """
    A, B = sorted((curveA, curveB), key=lambda c: (c.L, c.control.tobytes(), c.u4.tobytes()))
    lo = max(A.control[0], B.control[0])
    hi = min(A.control[-1], B.control[-1])
    L_small = min(A.L, B.L)
    if hi <= lo:
        return Crossing(float("nan"), float("nan"), "no-crossing", L_small=L_small)
    if A.control.size == B.control.size and np.array_equal(A.control, B.control) \
            and np.array_equal(A.u4, B.u4):
        return Crossing(float("nan"), float("nan"), "degenerate", L_small=L_small)
    T = _root(A.control, A.u4, B.control, B.u4, lo, hi)
    if T is None:
        return Crossing(float("nan"), float("nan"), "no-crossing", L_small=L_small)
    u = float(PchipInterpolator(A.control, A.u4)(T))

    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_resample):
        uA = A.u4 + rng.standard_normal(A.u4.size) * A.err
        uB = B.u4 + rng.standard_normal(B.u4.size) * B.err
        r = _root(A.control, uA, B.control, uB, lo, hi)
        if r is not None:
            samples.append(r)
    err = float(np.std(samples, ddof=1)) if len(samples) > 1 else float("nan")
    return Crossing(float(T), err, "ok", u, L_small)


@dataclass(frozen=True)
class TcEstimate:
    Tc: float
    err_stat: float
    err_sys: float
    slope: float
    n_points: int

    @property
    def err(self) -> float:
        return float(np.hypot(self.err_stat, self.err_sys))


def _linear_fit(x, y, w):
    """Weighted least squares y = c0 + c1 x; returns (coef, covariance of coef)."""
    A = np.column_stack([np.ones_like(x), x])
    Aw = A * w[:, None]
    cov = np.linalg.inv(Aw.T @ Aw)
    coef = cov @ (Aw.T @ (y * w))
    return coef, cov


def extrapolate_tc(crossings) -> TcEstimate:
    """Weighted linear fit of crossing temperature against 1/L_small; the intercept is T_c.

    ``crossings`` is a sequence of (L_small, T_cross, err). The systematic error is
    the intercept shift when the largest size is dropped (needs >= 3 points).
    """
    pts = [(float(L), float(T), float(e)) for L, T, e in crossings if np.isfinite(T)]
    if len(pts) < 2:
        raise InvalidParameterError("need at least 2 crossing points to extrapolate")
    L, T, e = map(np.array, zip(*pts))
    x = 1 / L
    w = 1 / e if np.all(e > 0) and np.all(np.isfinite(e)) else np.ones_like(e)
    coef, cov = _linear_fit(x, T, w)
    err_stat = float(np.sqrt(cov[0, 0])) if np.all(e > 0) else 0.0
    err_sys = 0.0
    if len(pts) >= 3:
        keep = L < L.max()
        sub, _ = _linear_fit(x[keep], T[keep], w[keep])
        err_sys = float(abs(sub[0] - coef[0]))
    return TcEstimate(float(coef[0]), err_stat, err_sys, float(coef[1]), len(pts))


@dataclass
class ScalingFit:
    Tc: float
    a: float
    omega: float
    theta_t: float
    b: float
    c: float
    dof_binder: int
    dof_tc: int
    errors: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)

    def tc_of_L(self, L):
        return self.Tc * (1 + self.a * np.asarray(L, float) ** (-self.omega - self.theta_t))

    def as_dict(self):
        return {k: getattr(self, k) for k in ("Tc", "a", "omega", "theta_t", "b", "c",
                                              "dof_binder", "dof_tc")} | {
            "errors": self.errors, "residuals": {k: list(map(float, v)) for k, v in self.residuals.items()},
            "zero_dof": self.dof_binder == 0 or self.dof_tc == 0}


def _lsq(fun, x0, label):
    res = least_squares(fun, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=20000)
    if not res.success:
        raise FitError(f"{label} fit did not converge: {res.message}", trace=res.fun)
    return res


def _param_errors(res, n, p):
    dof = n - p
    if dof <= 0:
        return None
    J = res.jac
    s2 = 2 * res.cost / dof
    try:
        cov = np.linalg.inv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        return None
    return np.sqrt(np.diag(cov))


def scaling_fit(L_values, T_cross, U_cross, *, omega0: float = 1.0, theta0: float = 0.5) -> ScalingFit:
    """Two-stage fit: U4_c(L) = b + c L^-omega, then T_c(L) = T_c (1 + a L^-(omega+theta_t)).

    ``L_values`` label the crossings (smaller size of each pair). Parameter errors are
    reported only when the corresponding fit has positive degrees of freedom.
    """
    L = np.asarray(L_values, float)
    T = np.asarray(T_cross, float)
    U = np.asarray(U_cross, float)
    if L.size < 3:
        raise InvalidParameterError("scaling fit needs at least 3 crossing points")

    def r_u(p):
        b, c, om = p
        return b + c * L ** (-om) - U

    b0 = U[np.argmax(L)]
    c0 = (U[np.argmin(L)] - b0) * L.min() ** omega0
    res_u = _lsq(r_u, [b0, c0, omega0], "Binder")
    b, c, om = res_u.x

    def r_t(p):
        tc, a, th = p
        return tc * (1 + a * L ** (-om - th)) - T

    tc0 = T[np.argmax(L)]
    a0 = (T[np.argmin(L)] / tc0 - 1) * L.min() ** (om + theta0)
    res_t = _lsq(r_t, [tc0, a0, theta0], "crossing-temperature")
    tc, a, th = res_t.x

    errors = {}
    eu = _param_errors(res_u, L.size, 3)
    et = _param_errors(res_t, L.size, 3)
    if eu is not None:
        errors.update(b=float(eu[0]), c=float(eu[1]), omega=float(eu[2]))
    if et is not None:
        errors.update(Tc=float(et[0]), a=float(et[1]), theta_t=float(et[2]))
    if L.size == 3:
        log.info("scaling fit has zero degrees of freedom; no error estimates")
    return ScalingFit(float(tc), float(a), float(om), float(th), float(b), float(c),
                      L.size - 3, L.size - 3, errors, {"u4": res_u.fun, "tc": res_t.fun})


def anchor_value(curves, fit: ScalingFit) -> float:
    """Common Binder value U* for the collapse: mean of each curve at its fitted T_c(L)."""
    return float(np.mean([PchipInterpolator(c.control, c.u4)(fit.tc_of_L(c.L)) for c in curves]))


def anchor_temperature(curve: BinderCurve, u_star: float, near: float) -> float:
    """Temperature where the interpolated curve equals ``u_star``; the root closest to ``near``."""
    f = PchipInterpolator(curve.control, curve.u4)
    grid = np.linspace(curve.control[0], curve.control[-1], 801)
    d = f(grid) - u_star
    k = np.flatnonzero(np.sign(d[:-1]) * np.sign(d[1:]) <= 0)
    if k.size == 0:
        raise FitError(f"L={curve.L}: Binder curve never reaches U*={u_star:.4g}")
    roots = [_bisect(lambda x: float(f(x) - u_star), grid[i], grid[i + 1]) for i in k]
    return float(min(roots, key=lambda r: abs(r - near)))


def collapse_coordinates(curve: BinderCurve, fit: ScalingFit, u_star: float | None = None) -> np.ndarray:
    """(T - T_c(L)) L^theta_t for every control value of the curve.

    Without ``u_star``, T_c(L) is the fitted crossing temperature. With it, T_c(L) is
    where this curve takes the value ``u_star``, so that all sizes meet at x = 0.
    """
    tc = fit.tc_of_L(curve.L)
    if u_star is not None:
        tc = anchor_temperature(curve, u_star, tc)
    return (curve.control - tc) * curve.L ** fit.theta_t


def spread_metric(xs, ys, n_grid: int = 200) -> float:
    """Mean standard deviation across curves on their common x range (pchip interpolated)."""
    lo = max(np.min(x) for x in xs)
    hi = min(np.max(x) for x in xs)
    if hi <= lo:
        raise InvalidParameterError("curves share no common range")
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([PchipInterpolator(np.asarray(x), np.asarray(y))(grid)
                     for x, y in zip(xs, ys)])
    return float(np.mean(np.std(vals, axis=0)))


def collapse_quality(curves, fit: ScalingFit, u_star: float | None = None) -> tuple[float, float]:
    """(uncollapsed spread in T, collapsed spread in the scaling variable).

    The collapse anchors every size at the common value ``u_star`` (default
    :func:`anchor_value`).
    """
    if u_star is None:
        u_star = anchor_value(curves, fit)
    raw = spread_metric([c.control for c in curves], [c.u4 for c in curves])
    col = spread_metric([collapse_coordinates(c, fit, u_star) for c in curves], [c.u4 for c in curves])
    return raw, col


def mean_field_tc(g: float, J: float = 1.0) -> float:
    """T_c/J = (g/J) / arctanh(g/J); 1 at g = 0, 0 for g/J >= 1."""
    x = abs(g / J)
    if x >= 1:
        return 0.0
    if x < 1e-8:
        return J * (1 - x**2 / 3)
    return J * x / np.arctanh(x)


@dataclass
class PhaseDiagramGrid:
    """Observable maps over (energy density, field).

    ``values[name]`` has shape (n_eps, n_g); absent cells are NaN and marked in ``absent``.
    """

    g: np.ndarray
    eps: np.ndarray
    values: dict
    absent: np.ndarray
    ensemble: str
    critical_line: list = field(default_factory=list)
    eps_min: np.ndarray | None = None
    tag: str = "small-L estimate"

    def to_json(self, path):
        return write_json(path, {
            "g": self.g, "eps": self.eps, "ensemble": self.ensemble, "tag": self.tag,
            "values": {k: np.where(self.absent, None, v).tolist() for k, v in self.values.items()},
            "absent": self.absent, "eps_min": self.eps_min,
            "critical_line": self.critical_line,
        })

    def to_csv(self, path):
        names = sorted(self.values)
        rows = []
        for a, e in enumerate(self.eps):
            for b, g in enumerate(self.g):
                rows.append([g, e, int(self.absent[a, b])] + [self.values[n][a, b] for n in names])
        return write_csv(path, ["g", "eps", "absent"] + names, rows, [f"ensemble: {self.ensemble}"])

    def critical_line_csv(self, path):
        rows = [[c["g"], c["Tc"], c["Tc_err"], c["eps_c"], c["eps_c_err"]] for c in self.critical_line]
        return write_csv(path, ["g", "Tc", "Tc_err", "eps_c", "eps_c_err"], rows, [self.tag])


def _key(x, decimals=10):
    return round(float(x), decimals)


def assemble_phase_diagram(results, critical=None, eps_min=None, energy_of_T=None,
                           energies=None) -> PhaseDiagramGrid:
    """Arrange EnsembleResults into an (eps, g) grid.

    Parameters
    ----------
    results : iterable of EnsembleResult
        Each must carry ``params["g"]``. All share one ensemble tag.
    critical : dict g -> (T_c, err), optional
        Critical temperatures to convert into critical energy densities.
    eps_min : dict g -> ground-state energy density, optional
        Cells below it are marked absent instead of counting as missing.
    energy_of_T : dict g -> callable T -> eps, optional
        Canonical energy density used for the T_c -> eps_c conversion.
    energies : sequence of float, optional
        Full energy-density axis. Rows without any result are allowed only where
        ``eps_min`` marks them absent.
    """
    results = list(results)
    if not results:
        raise InvalidParameterError("no ensemble results to assemble")
    tags = {r.ensemble for r in results}
    if len(tags) != 1:
        raise InvalidParameterError(f"mixed ensemble tags {sorted(tags)}")
    gs = sorted({_key(r.params["g"]) for r in results})
    es = sorted({_key(r.energy_density) for r in results} | {_key(e) for e in (energies or ())})
    names = sorted({r.observable for r in results})
    vals = {n: np.full((len(es), len(gs)), np.nan) for n in names}
    filled = {n: np.zeros((len(es), len(gs)), bool) for n in names}
    gi = {g: k for k, g in enumerate(gs)}
    ei = {e: k for k, e in enumerate(es)}
    for r in results:
        a, b = ei[_key(r.energy_density)], gi[_key(r.params["g"])]
        vals[r.observable][a, b] = float(r.value)
        filled[r.observable][a, b] = True
    eps_arr = np.array(es)
    floor = np.array([eps_min.get(g, -np.inf) if eps_min else -np.inf for g in gs])
    absent = eps_arr[:, None] < floor[None, :]
    for n in names:
        missing = ~filled[n] & ~absent
        if missing.any():
            a, b = np.argwhere(missing)[0]
            raise InvalidParameterError(
                f"ragged grid: {n} missing at eps={es[a]}, g={gs[b]}")
    line = []
    for g, (Tc, err) in sorted((critical or {}).items()):
        entry = {"g": float(g), "Tc": float(Tc), "Tc_err": float(err),
                 "eps_c": float("nan"), "eps_c_err": float("nan")}
        f = (energy_of_T or {}).get(_key(g))
        if f is not None and Tc > 0:
            e = f(Tc)
            hi, lo = f(Tc + err), f(max(Tc - err, 1e-9))
            entry.update(eps_c=float(e), eps_c_err=float(abs(hi - lo) / 2))
        line.append(entry)
    return PhaseDiagramGrid(np.array(gs), eps_arr, vals, absent, tags.pop(), line,
                            None if eps_min is None else floor)
