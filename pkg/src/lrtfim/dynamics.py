"""Exact quench dynamics of x-product states and measurement of magnetization observables."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csvio import write_csv
from .ensembles import ED_MAX_L, SpectrumCache, diagonalize
from .errors import CapabilityError, ConvergenceError, InvalidParameterError, SizeMismatchError
from .hilbert import HamiltonianOperator
from .model import ModelSpec, ProductState
from .observables import basis_probabilities, correlation_matrix, get_observable

STATE_MAX_L = 24
KRYLOV_DIM = 30
KRYLOV_TOL = 1e-9
DEFAULT_DT = 0.1
DEFAULT_T_MAX = 12.0


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray

    @property
    def L(self) -> int:
        return self.amplitudes.size.bit_length() - 1

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


@dataclass
class ObservableSeries:
    times: np.ndarray
    values: dict = field(default_factory=dict)
    correlations: np.ndarray | None = None  # (n_times, L, L)

    def __getitem__(self, name):
        return self.values[name]

    def to_csv(self, path, comments=()) -> Path:
        names = sorted(self.values)
        rows = [[t] + [self.values[n][k] for n in names] for k, t in enumerate(self.times)]
        path = write_csv(path, ["t"] + names, rows, comments)
        if self.correlations is not None:
            stem = Path(path).with_suffix("")
            L = self.correlations.shape[1]
            for k, C in enumerate(self.correlations):
                write_csv(f"{stem}_corr_{k:04d}.csv", [f"j{j}" for j in range(L)], C.tolist(),
                          [f"t: {self.times[k]!r}"])
        return path


def default_times(t_max: float = DEFAULT_T_MAX, dt: float = DEFAULT_DT) -> np.ndarray:
    n = int(round(t_max / dt))
    return np.linspace(0.0, n * dt, n + 1)


def encode_product_state(state: ProductState, max_L: int = STATE_MAX_L) -> StateVector:
    """Tensor product of R_y(tilt)|+x> or R_y(tilt)|-x> over sites (site 0 leftmost)."""
    if state.L > max_L:
        raise CapabilityError(f"state vectors are capped at L <= {max_L}, got {state.L}")
    c, s = np.cos(state.tilt / 2), np.sin(state.tilt / 2)
    ry = np.array([[c, -s], [s, c]])
    plus = ry @ np.array([1.0, 1.0]) / np.sqrt(2)
    minus = ry @ np.array([1.0, -1.0]) / np.sqrt(2)
    psi = np.ones(1)
    for v in state.spins:
        psi = np.kron(psi, plus if v > 0 else minus)
    return StateVector(psi.astype(complex))


def _measure(psi: np.ndarray, observables, correlations: bool):
    """psi has shape (D, n_times); returns dict of arrays and optional (n_times, L, L)."""
    probs = {}
    out = {}
    for name in observables:
        if name == "energy":
            continue
        o = get_observable(name)
        if o.basis not in probs:
            probs[o.basis] = basis_probabilities(psi, o.basis)
        out[name] = o.evaluate(probs[o.basis])
    corr = None
    if correlations:
        px = probs.get("x")
        if px is None:
            px = basis_probabilities(psi, "x")
        corr = np.moveaxis(correlation_matrix(px), 2, 0)
    return out, corr


def lanczos_step(apply_h, psi: np.ndarray, tau: float, m: int = KRYLOV_DIM, tol: float = KRYLOV_TOL):
    """Propagate by at most ``tau`` with an m-dimensional Lanczos basis.

    Returns (new_psi, tau_taken, error_estimate). The step is shortened until the
    standard a-posteriori estimate beta_m |[exp(-i tau T) e_1]_m| is below ``tol``.
    """
    beta0 = np.linalg.norm(psi)
    V = np.zeros((m + 1, psi.size), dtype=complex)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    V[0] = psi / beta0
    k_used = m
    for k in range(m):
        w = apply_h(V[k])
        alpha[k] = np.vdot(V[k], w).real
        # full reorthogonalization; m is small
        w -= V[: k + 1].T @ (V[: k + 1].conj() @ w)
        w -= V[: k + 1].T @ (V[: k + 1].conj() @ w)
        beta[k] = np.linalg.norm(w)
        if beta[k] < 1e-13 * max(1.0, abs(alpha[k])):
            k_used = k + 1
            break
        V[k + 1] = w / beta[k]
    n = k_used
    T = np.diag(alpha[:n]) + np.diag(beta[: n - 1], 1) + np.diag(beta[: n - 1], -1)
    theta, S = np.linalg.eigh(T)
    happy = n < m or beta[n - 1] < 1e-13
    while True:
        y = S @ (np.exp(-1j * theta * tau) * S[0])
        err = 0.0 if happy else beta0 * beta[n - 1] * abs(y[n - 1])
        if err <= tol:
            return beta0 * (V[:n].T @ y), tau, err
        tau *= 0.5
        if tau < 1e-14:
            raise ConvergenceError("Krylov step size collapsed", residual=err)


def krylov_evolve(psi0: np.ndarray, model: ModelSpec, times, *, m: int = KRYLOV_DIM,
                  tol: float = KRYLOV_TOL) -> np.ndarray:
    """psi(t) at each requested (non-decreasing, >= 0) time via adaptive Lanczos steps."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise InvalidParameterError("times must be non-negative and non-decreasing")
    H = HamiltonianOperator(model.Jij, model.g)
    # initial guess from the spectral scale |H| ~ sum|J| + g L
    scale = np.abs(np.triu(model.Jij, 1)).sum() + abs(model.g) * model.L + 1e-12
    tau_next = min(1.0, 10.0 / scale)
    out = np.empty((times.size, psi0.size), dtype=complex)
    psi = psi0.astype(complex)
    t = 0.0
    for k, target in enumerate(times):
        while target - t > 1e-13:
            tau = min(tau_next, target - t)
            psi, taken, _ = lanczos_step(H, psi, tau, m, tol)
            t += taken
            tau_next = taken * 1.5 if taken == tau else taken
        out[k] = psi
    return out


def evolve_and_measure(
    state0,
    model: ModelSpec,
    times=None,
    observables=("sx2", "sz"),
    *,
    correlations: bool = False,
    method: str = "auto",
    cache: SpectrumCache | None = None,
) -> ObservableSeries:
    """Time-evolve ``state0`` under ``model`` and record expectation values.

    ``method`` is ``"dense"`` (full diagonalization, L <= 14), ``"krylov"``, or
    ``"auto"``. Passing an existing ``cache`` skips the diagonalization.
    """
    if isinstance(state0, ProductState):
        state0 = encode_product_state(state0)
    psi0 = state0.amplitudes if isinstance(state0, StateVector) else np.asarray(state0)
    L = psi0.size.bit_length() - 1
    if L != model.L:
        raise SizeMismatchError(f"state has L={L} but model has L={model.L}")
    times = default_times() if times is None else np.asarray(times, dtype=float)
    if method == "auto":
        method = "dense" if (cache is not None or L <= ED_MAX_L) else "krylov"
    if method == "dense":
        cache = cache if cache is not None else diagonalize(model)
        psi_t = cache.evolve(psi0, times)
    elif method == "krylov":
        psi_t = krylov_evolve(psi0, model, times)
    else:
        raise InvalidParameterError(f"unknown method {method!r}")
    values, corr = _measure(psi_t.T, observables, correlations)
    if "energy" in observables:
        H = HamiltonianOperator(model.Jij, model.g)
        values["energy"] = np.real(np.einsum("tb,bt->t", psi_t.conj(), H(psi_t.T)))
    values["norm"] = np.linalg.norm(psi_t, axis=1)
    return ObservableSeries(times, values, corr)


def time_average(series: ObservableSeries, T: float | None = None, name: str | None = None):
    """Running mean (1/T) int_0^T O(t) dt by the trapezoidal rule on the sampled grid.

    With ``T=None`` the full horizon is used. Returns a float for ``name``, else a dict.
    """
    t = np.asarray(series.times)
    if t.size < 2:
        raise InvalidParameterError("time averaging needs at least 2 samples")
    if T is None:
        T = t[-1]
    if not t[0] < T <= t[-1] + 1e-12:
        raise InvalidParameterError(f"T={T} outside the sampled horizon ({t[0]}, {t[-1]}]")
    before = t < T

    def avg(y):
        y = np.asarray(y, dtype=float)
        tt = np.append(t[before], T)
        yy = np.append(y[before], np.interp(T, t, y))
        return np.trapezoid(yy, tt) / (T - t[0])

    names = [name] if name else [n for n in series.values if n != "norm"]
    out = {}
    for n in names:
        out[n] = float(avg(series.values[n]))
    return out[name] if name else out


def running_average(series: ObservableSeries, name: str) -> np.ndarray:
    """Trapezoidal running mean at every grid time after the first."""
    t = np.asarray(series.times)
    y = np.asarray(series.values[name])
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))])
    out = np.empty_like(y, dtype=float)
    out[0] = y[0]
    out[1:] = integral[1:] / (t[1:] - t[0])
    return out


def sample_shots(state, basis: str, n_shots: int, seed=None) -> dict:
    """Projective measurement counts; outcome strings use 'u' for +1 and 'd' for -1 per site."""
    if n_shots < 1:
        raise InvalidParameterError("n_shots must be >= 1")
    if basis not in ("x", "z"):
        raise InvalidParameterError("basis must be 'x' or 'z'")
    psi = state.amplitudes if isinstance(state, StateVector) else np.asarray(state)
    p = basis_probabilities(psi, basis)
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    draws = rng.choice(p.size, size=n_shots, p=p)
    idx, counts = np.unique(draws, return_counts=True)
    L = psi.size.bit_length() - 1
    return {
        "".join("d" if (int(b) >> (L - 1 - i)) & 1 else "u" for i in range(L)): int(c)
        for b, c in zip(idx, counts)
    }


def counts_to_spins(counts: dict) -> tuple[np.ndarray, np.ndarray]:
    """(n_outcomes, L) spin array and matching counts."""
    keys = list(counts)
    S = np.array([[1 if ch == "u" else -1 for ch in k] for k in keys], dtype=float)
    return S, np.array([counts[k] for k in keys], dtype=float)


def estimate_sx2(counts: dict) -> float:
    """Unbiased shot estimate of S_x^2 = sum_ij <sx_i sx_j> / L^2 from x-basis outcomes."""
    S, c = counts_to_spins(counts)
    m = S.mean(axis=1)
    return float(c @ m**2 / c.sum())


def estimate_correlations(counts: dict) -> np.ndarray:
    S, c = counts_to_spins(counts)
    return (S * c[:, None]).T @ S / c.sum()
