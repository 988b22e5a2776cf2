"""Coupling matrices from trapped-ion physics.

Equilibrium positions in an anharmonic axial well, the radial normal modes of
the crystal, and the dispersive spin-spin couplings they mediate. Inputs use
lab units (eV/mm^2, eV/mm^4, rad/s, amu); internally everything is SI and
positions are reported in micrometres.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import constants as sc
from scipy.optimize import minimize_scalar

from .errors import (
    ConvergenceError,
    InvalidParameterError,
    NearResonanceError,
    SizeMismatchError,
    ZigzagInstabilityError,
)
from .model import CouplingMatrix

log = logging.getLogger(__name__)

KE2 = sc.e**2 / (4 * np.pi * sc.epsilon_0)  # J m
EV = sc.e
MM = 1e-3
UM = 1e-6
TWO_PI = 2 * np.pi
RESONANCE_GUARD = TWO_PI * 1e3
CONVENTIONS = ("mode-detuning", "as-printed")


@dataclass(frozen=True)
class TrapConfig:
    """Axial potential V(x) = c4 x^4 + c2 x^2 plus a harmonic radial well of COM frequency omega1."""

    N: int
    c2: float  # eV / mm^2
    c4: float = 0.0  # eV / mm^4
    omega1: float = TWO_PI * 3.075e6  # rad / s
    mass: float = 171.0  # amu

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise InvalidParameterError(f"need at least 2 ions, got N={self.N}")
        if self.omega1 <= 0 or self.mass <= 0:
            raise InvalidParameterError("omega1 and mass must be positive")
        if self.c4 < 0 or (self.c4 == 0 and self.c2 <= 0):
            raise InvalidParameterError("axial potential is not confining")

    @property
    def mass_kg(self) -> float:
        return self.mass * sc.atomic_mass

    @property
    def c2_si(self) -> float:
        return self.c2 * EV / MM**2

    @property
    def c4_si(self) -> float:
        return self.c4 * EV / MM**4


@dataclass(frozen=True)
class BeamConfig:
    """Per-ion drive amplitudes (0 switches a beam off) and the common detuning (rad/s).

    ``detuning`` is the average (Delta_+ + Delta_-)/2 of the red and blue sideband
    offsets beyond the lowest radial mode, for nearly symmetric sidebands.
    """

    rabi: tuple
    detuning: float
    eta0: float = 0.08
    staggered: bool = True
    convention: str = "mode-detuning"

    def __post_init__(self):
        r = np.asarray(self.rabi, dtype=float)
        if r.ndim != 1 or np.any(r < 0):
            raise InvalidParameterError("Rabi amplitudes must be a 1D nonnegative sequence")
        if np.count_nonzero(r) < 2:
            raise InvalidParameterError("at least two beams must be on")
        if self.convention not in CONVENTIONS:
            raise InvalidParameterError(f"convention must be one of {CONVENTIONS}")
        object.__setattr__(self, "rabi", tuple(float(v) for v in r))

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.rabi) > 0)


@dataclass(frozen=True)
class ModeSpectrum:
    positions: np.ndarray  # micrometres, increasing
    frequencies: np.ndarray  # rad/s, decreasing; [0] is the COM mode
    participation: np.ndarray  # b[i, k]
    hessian: np.ndarray = field(repr=False, default=None)  # radial A_ij in (rad/s)^2

    @property
    def N(self) -> int:
        return self.positions.size


def _scaled_coefficients(trap: TrapConfig):
    """Potential in units of KE2 / um with x in um: a2 u^2 + a4 u^4."""
    unit = KE2 / UM
    return trap.c2_si * UM**2 / unit, trap.c4_si * UM**4 / unit


def _energy(u, a2, a4):
    d = np.abs(u[:, None] - u[None, :])
    iu = np.triu_indices(u.size, 1)
    return float(np.sum(a2 * u**2 + a4 * u**4) + np.sum(1.0 / d[iu]))


def _grad_hess(u, a2, a4):
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    grad = 2 * a2 * u + 4 * a4 * u**3 - np.sum(np.sign(diff) / diff**2, axis=1)
    K = 2.0 / np.abs(diff) ** 3
    H = -K
    np.fill_diagonal(H, 2 * a2 + 12 * a4 * u**2 + K.sum(axis=1))
    return grad, H


def solve_equilibrium_positions(trap: TrapConfig, max_iter: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Minimum of the axial potential plus Coulomb repulsion, in micrometres.

    Starts from the best uniform chain (1D search over the spacing) and runs a
    damped Newton iteration with a Levenberg shift whenever the Hessian is not
    positive definite. Convergence is declared when the gradient norm, in units
    of KE2 / um^2, falls below ``tol``.
    """
    a2, a4 = _scaled_coefficients(trap)
    N = trap.N
    base = np.arange(N) - (N - 1) / 2

    res = minimize_scalar(lambda s: _energy(np.exp(s) * base, a2, a4), bracket=(0.0, 2.0))
    u = np.exp(res.x) * base
    E = _energy(u, a2, a4)
    gnorm = np.inf
    for it in range(max_iter):
        g, H = _grad_hess(u, a2, a4)
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break
        lam_min = np.linalg.eigvalsh(H)[0]
        shift = 0.0 if lam_min > 0 else 1.1 * abs(lam_min) + 1e-6
        step = np.linalg.solve(H + shift * np.eye(N), -g)
        t = 1.0
        while True:
            trial = u + t * step
            if np.all(np.diff(trial) > 0):
                E_trial = _energy(trial, a2, a4)
                if E_trial <= E + 1e-4 * t * (g @ step) or t < 1e-12:
                    break
            t *= 0.5
        u, E = trial, E_trial
    else:
        raise ConvergenceError(f"position solve did not converge in {max_iter} iterations", residual=gnorm)
    u = 0.5 * (u - u[::-1])
    log.debug("equilibrium found in %d Newton steps, |grad| = %.2e", it, gnorm)
    return u


def compute_radial_modes(positions, trap: TrapConfig) -> ModeSpectrum:
    """Radial normal modes of the chain at the given positions (micrometres).

    Columns of the participation matrix are sign-fixed so that the first entry
    with magnitude above 1e-8 is positive, which makes the output deterministic.
    """
    x = np.asarray(positions, dtype=float) * UM
    if x.size != trap.N:
        raise SizeMismatchError(f"{x.size} positions for a {trap.N}-ion trap")
    if np.any(np.diff(x) <= 0):
        raise InvalidParameterError("positions must be strictly increasing")
    d = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(d, np.inf)
    K = KE2 / (trap.mass_kg * d**3)
    A = K.copy()
    np.fill_diagonal(A, trap.omega1**2 - K.sum(axis=1))
    w2, b = np.linalg.eigh(A)
    if w2[0] < 0:
        raise ZigzagInstabilityError(
            f"radial mode with negative curvature {w2[0]:.3e} (rad/s)^2; the linear chain is unstable")
    order = np.argsort(w2)[::-1]
    w2, b = w2[order], b[:, order]
    for k in range(b.shape[1]):
        first = b[np.flatnonzero(np.abs(b[:, k]) > 1e-8)[0], k]
        if first < 0:
            b[:, k] = -b[:, k]
    return ModeSpectrum(np.asarray(positions, dtype=float), np.sqrt(w2), b, A)


def mode_detunings(spectrum: ModeSpectrum, detuning: float, convention: str = "mode-detuning") -> np.ndarray:
    """Detuning of the drive from every mode.

    ``mode-detuning`` places the beatnote at omega_N + detuning, giving
    D_k = detuning + omega_N - omega_k. ``as-printed`` gives detuning - omega_N - omega_k.
    """
    w = spectrum.frequencies
    if convention == "mode-detuning":
        return detuning + w[-1] - w
    if convention == "as-printed":
        return detuning - w[-1] - w
    raise InvalidParameterError(f"convention must be one of {CONVENTIONS}")


def synthesize_couplings(spectrum: ModeSpectrum, beams: BeamConfig,
                         guard: float = RESONANCE_GUARD) -> CouplingMatrix:
    """Spin-spin couplings mediated by the radial modes, restricted to ions with a beam on.

    The returned matrix follows the package sign convention (H = -sum J_ij sx sx),
    so it is the negative of the dispersive sum eta_ik eta_jk Omega_i Omega_j / (2 D_k).
    Entries are in the units of Omega^2 / detuning (rad/s for absolute Rabi rates).
    """
    omega = np.asarray(beams.rabi, dtype=float)
    if omega.size != spectrum.N:
        raise SizeMismatchError(f"{omega.size} beam amplitudes for {spectrum.N} ions")
    D = mode_detunings(spectrum, beams.detuning, beams.convention)
    close = np.abs(D) < guard
    if np.any(close):
        k = int(np.flatnonzero(close)[0])
        raise NearResonanceError(
            f"drive is {D[k] / TWO_PI:.1f} Hz from mode {k}; dispersive couplings need |D| >= {guard / TWO_PI:.0f} Hz")
    eta = beams.eta0 * spectrum.participation
    J = -((eta / (2 * D)) @ eta.T) * np.outer(omega, omega)
    if beams.staggered:
        idx = np.arange(spectrum.N)
        J = J * (-1.0) ** (idx[:, None] + idx[None, :])
    act = beams.active
    J = J[np.ix_(act, act)]
    np.fill_diagonal(J, 0.0)
    meta = {
        "ions": int(spectrum.N),
        "active_ions": act.tolist(),
        "detuning_rad_s": float(beams.detuning),
        "convention": beams.convention,
        "staggered": bool(beams.staggered),
        "eta0": float(beams.eta0),
    }
    return CouplingMatrix(J, "ion-derived", None, meta)


def calibrate_to_target(couplings: CouplingMatrix) -> tuple[float, CouplingMatrix]:
    """Energy scale J = max_ij J_ij and the matrix divided by it."""
    Jmax = float(np.max(couplings.J)) if couplings.L > 1 else 0.0
    if couplings.L < 2 or not np.any(couplings.J):
        raise InvalidParameterError("cannot calibrate an empty or all-zero coupling matrix")
    if Jmax <= 0:
        raise InvalidParameterError("largest coupling is not positive; check the staggering and detuning sign")
    meta = dict(couplings.meta, J_scale=Jmax)
    return Jmax, CouplingMatrix(couplings.J / Jmax, couplings.provenance, couplings.gamma, meta)


# Lab configurations used in the experiment this package models.
TRAP_15 = TrapConfig(N=15, c2=0.11, c4=1.6e3)
TRAP_27 = TrapConfig(N=27, c2=-0.1, c4=235.0)
RABI_23 = (1, 1, 0.72, 0.76, 0.6, 0.72, 0.63, 0.81, 0.72, 0.91, 0.78, 0.94,
           0.78, 0.9, 0.72, 0.8, 0.62, 0.71, 0.59, 0.75, 0.71, 0.99, 1)


def _centered_beams(N: int, amplitudes) -> tuple:
    amplitudes = list(amplitudes)
    off = (N - len(amplitudes)) // 2
    return tuple([0.0] * off + amplitudes + [0.0] * (N - len(amplitudes) - off))


PRESETS = {
    7: (TRAP_15, BeamConfig(_centered_beams(15, [1.0] * 7), -TWO_PI * 100e3)),
    13: (TRAP_15, BeamConfig(_centered_beams(15, [1.0] * 13), -TWO_PI * 35e3)),
    23: (TRAP_27, BeamConfig(_centered_beams(27, RABI_23), -TWO_PI * 9e3)),
}


def preset_couplings(L: int, uniform: bool = False, normalize: bool = True) -> CouplingMatrix:
    """Coupling matrix of a lab configuration (L = 7, 13 or 23).

    ``uniform`` replaces the configured beam amplitudes by ones. With ``normalize``
    the matrix is divided by its largest entry.
    """
    if L not in PRESETS:
        raise InvalidParameterError(f"no lab configuration for L={L}; available: {sorted(PRESETS)}")
    trap, beams = PRESETS[L]
    if uniform:
        beams = BeamConfig(tuple(float(r > 0) for r in beams.rabi), beams.detuning, beams.eta0,
                           beams.staggered, beams.convention)
    spec = compute_radial_modes(solve_equilibrium_positions(trap), trap)
    J = synthesize_couplings(spec, beams)
    return calibrate_to_target(J)[1] if normalize else J
