"""Exact equilibrium references from full diagonalization.

The Hamiltonian is diagonalized sector by sector (Z2 parity, plus site reflection
for mirror-symmetric couplings). Eigenvectors are kept in sector coordinates and
expanded into the full z basis only when needed.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import CapabilityError, InvalidParameterError, SizeMismatchError
from .hilbert import HamiltonianOperator, Sector, sparse_hamiltonian, symmetry_sectors
from .model import ModelSpec
from .observables import basis_probabilities, correlation_matrix, get_observable

log = logging.getLogger(__name__)

ED_MAX_L = 14
MIN_WINDOW_STATES = 10
ENSEMBLE_TAGS = ("time-averaged", "diagonal", "canonical", "microcanonical", "monte-carlo")


class SpectrumCache:
    """Full spectrum of one Hamiltonian, immutable after construction.

    Attributes
    ----------
    energies : ndarray
        All eigenvalues in ascending order.
    blocks : list of ndarray
        Index groups (into ``energies``) of degenerate eigenvalues, only groups of size > 1.
    """

    def __init__(self, L, sectors, params=None, tau_deg=None):
        self.L = L
        self.dim = 2**L
        self.params = dict(params or {})
        self._sectors = [(sec, np.asarray(E), np.asarray(V)) for sec, E, V in sectors]
        E_all = np.concatenate([E for _, E, _ in self._sectors])
        sec_id = np.concatenate([np.full(E.size, k) for k, (_, E, _) in enumerate(self._sectors)])
        local = np.concatenate([np.arange(E.size) for _, E, _ in self._sectors])
        order = np.argsort(E_all, kind="stable")
        self.energies = E_all[order]
        self._sec_id = sec_id[order]
        self._local = local[order]
        # position of (sector, local) in the sorted order
        self._pos = []
        for k, (_, E, _) in enumerate(self._sectors):
            self._pos.append(np.flatnonzero(self._sec_id == k)[np.argsort(self._local[self._sec_id == k])])
        scale = max(1.0, abs(self.params.get("J", 1.0)))
        self.tau_deg = 1e-10 * scale * L if tau_deg is None else tau_deg
        self.blocks = self._group_degenerate()
        self._diag_cache = {}
        for arr in (self.energies,):
            arr.setflags(write=False)

    @classmethod
    def from_dense(cls, energies, vectors, params=None, tau_deg=None):
        """Wrap an explicit eigen-decomposition given in the full z basis."""
        vectors = np.asarray(vectors)
        D = vectors.shape[0]
        L = D.bit_length() - 1
        Q = sp.identity(D, format="csr")
        return cls(L, [(Sector("full", Q), np.asarray(energies, float), vectors)], params, tau_deg)

    def _group_degenerate(self):
        gaps = np.diff(self.energies) > self.tau_deg
        starts = np.concatenate([[0], np.flatnonzero(gaps) + 1])
        ends = np.concatenate([starts[1:], [self.energies.size]])
        return [np.arange(s, e) for s, e in zip(starts, ends) if e - s > 1]

    @property
    def sector_labels(self):
        return [sec.label for sec, _, _ in self._sectors]

    def overlaps(self, psi: np.ndarray) -> np.ndarray:
        """<n|psi> for every eigenstate in ascending-energy order (column-wise for 2D psi)."""
        if psi.shape[0] != self.dim:
            raise SizeMismatchError(f"state dimension {psi.shape[0]} != {self.dim}")
        out = np.empty((self.energies.size,) + psi.shape[1:], dtype=np.result_type(psi.dtype, float))
        for k, (sec, _, V) in enumerate(self._sectors):
            out[self._pos[k]] = V.T @ (sec.Q.T @ psi)
        return out

    def vectors(self, indices) -> np.ndarray:
        """Full z-basis eigenvectors for the given sorted-order indices, as columns."""
        indices = np.atleast_1d(np.asarray(indices))
        out = np.zeros((self.dim, indices.size))
        for k, (sec, _, V) in enumerate(self._sectors):
            sel = np.flatnonzero(self._sec_id[indices] == k)
            if sel.size:
                out[:, sel] = sec.Q @ V[:, self._local[indices[sel]]]
        return out

    def combine(self, indices, coeffs) -> np.ndarray:
        """sum_n coeffs_n |n> over the given sorted-order indices."""
        return self.vectors(indices) @ coeffs

    def diag_elements(self, obs, chunk: int = 1024) -> np.ndarray:
        """<n|O|n> for all eigenstates (ascending energy); ``"corr"`` gives (n, L, L)."""
        key = obs if isinstance(obs, str) else obs.name
        if key in self._diag_cache:
            return self._diag_cache[key]
        if key == "corr":
            out = np.empty((self.energies.size, self.L, self.L))
        else:
            o = get_observable(obs)
            out = np.empty(self.energies.size)
        for k, (sec, _, V) in enumerate(self._sectors):
            for start in range(0, V.shape[1], chunk):
                cols = slice(start, min(start + chunk, V.shape[1]))
                Y = sec.Q @ V[:, cols]
                if key == "corr":
                    P = basis_probabilities(Y, "x")
                    out[self._pos[k][cols]] = np.moveaxis(correlation_matrix(P), 2, 0)
                else:
                    out[self._pos[k][cols]] = o.evaluate(basis_probabilities(Y, o.basis))
        out.setflags(write=False)
        self._diag_cache[key] = out
        return out

    def evolve(self, psi0: np.ndarray, times) -> np.ndarray:
        """psi(t) = sum_n e^{-i E_n t} <n|psi0> |n> for each time; returns shape (len(times), D)."""
        times = np.asarray(times, dtype=float)
        out = np.zeros((times.size, self.dim), dtype=complex)
        for k, (sec, E, V) in enumerate(self._sectors):
            c = V.T @ (sec.Q.T @ psi0)
            if not np.any(c):
                continue
            phases = np.exp(-1j * np.outer(E, times)) * c[:, None]
            out += (sec.Q @ (V @ phases)).T
        return out

    def residuals(self, n: int = 100, seed: int = 0, model: ModelSpec | None = None) -> np.ndarray:
        """||H v - E v|| for ``n`` randomly chosen eigenpairs."""
        if model is None:
            raise InvalidParameterError("residual check needs the model")
        H = HamiltonianOperator(model.Jij, model.g)
        rng = np.random.default_rng(seed)
        idx = rng.choice(self.energies.size, size=min(n, self.energies.size), replace=False)
        V = self.vectors(idx)
        return np.linalg.norm(H(V) - V * self.energies[idx], axis=0)

    def ground_energy_density(self) -> float:
        return float(self.energies[0] / self.L)


def diagonalize(model: ModelSpec, *, max_L: int = ED_MAX_L, use_symmetry: bool = True) -> SpectrumCache:
    """Full spectrum and eigenvectors of the model Hamiltonian."""
    L = model.L
    if L > max_L:
        raise CapabilityError(
            f"exact diagonalization is capped at L <= {max_L} (got L={L}); use the Monte Carlo "
            "workflow at g=0 or dynamics-only (Krylov) runs for larger systems"
        )
    H = sparse_hamiltonian(model.Jij, model.g)
    if use_symmetry:
        sectors = symmetry_sectors(L, mirror=model.couplings.is_mirror_symmetric())
    else:
        sectors = [Sector("full", sp.identity(2**L, format="csr"))]
    parts = []
    for sec in sectors:
        Hs = (sec.Q.T @ H @ sec.Q).toarray()
        E, V = sla.eigh(Hs, driver="evd", overwrite_a=True, check_finite=False)
        parts.append((sec, E, V))
        log.debug("sector %s: dim %d diagonalized", sec.label, sec.dim)
    params = {"L": L, "g": model.g, "J": model.J, "gamma": model.couplings.gamma,
              "provenance": model.couplings.provenance}
    return SpectrumCache(L, parts, params)


@dataclass(frozen=True)
class EnsembleResult:
    energy_density: float
    observable: str
    value: object
    ensemble: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ensemble not in ENSEMBLE_TAGS:
            raise InvalidParameterError(f"unknown ensemble tag {self.ensemble!r}")


def diagonal_ensemble(psi0: np.ndarray, cache: SpectrumCache, obs):
    """Infinite-time average: sum over degenerate blocks B of <psi|P_B O P_B|psi>.

    Reduces to sum_n |<n|psi>|^2 <n|O|n> for a nondegenerate spectrum.
    """
    c = cache.overlaps(psi0)
    d = cache.diag_elements(obs)
    w = np.abs(c) ** 2
    in_block = np.zeros(c.size, dtype=bool)
    for B in cache.blocks:
        in_block[B] = True
    value = np.tensordot(w[~in_block], d[~in_block], axes=(0, 0))
    key = obs if isinstance(obs, str) else obs.name
    for B in cache.blocks:
        if not np.any(w[B]):
            continue
        phi = cache.combine(B, c[B])
        if key == "corr":
            value = value + correlation_matrix(basis_probabilities(phi, "x"))
        else:
            o = get_observable(obs)
            value = value + o.evaluate(basis_probabilities(phi, o.basis))
    return value


def _boltzmann(cache: SpectrumCache, T: float) -> np.ndarray:
    if T <= 0:
        raise InvalidParameterError("temperature must be positive")
    # shift by the ground energy so the largest weight is exactly 1
    w = np.exp(-(cache.energies - cache.energies[0]) / T)
    return w / w.sum()


def canonical_energy_density(cache: SpectrumCache, T: float) -> float:
    if np.isinf(T):
        return float(cache.energies.mean() / cache.L)
    return float(_boltzmann(cache, T) @ cache.energies / cache.L)


def canonical_expectation(cache: SpectrumCache, obs, T: float) -> EnsembleResult:
    """Tr[O e^{-H/T}] / Tr[e^{-H/T}]; ``T=np.inf`` gives the maximally mixed value."""
    d = cache.diag_elements(obs)
    w = np.full(cache.energies.size, 1 / cache.energies.size) if np.isinf(T) else _boltzmann(cache, T)
    key = obs if isinstance(obs, str) else obs.name
    return EnsembleResult(
        canonical_energy_density(cache, T), key, np.tensordot(w, d, axes=(0, 0)), "canonical",
        {**cache.params, "T": T},
    )


def microcanonical_expectation(cache: SpectrumCache, obs, E: float, window: float | None = None) -> float:
    """Mean of <n|O|n> over |E_n - E| < window/2; default window 0.05 J L, doubled until >= 10 states."""
    scale = abs(cache.params.get("J", 1.0))
    width = 0.05 * scale * cache.L if window is None else window
    span = cache.energies[-1] - cache.energies[0]
    d = cache.diag_elements(obs)
    while True:
        sel = np.abs(cache.energies - E) < width / 2
        if sel.sum() >= MIN_WINDOW_STATES:
            break
        if width > 2 * span + 2 * abs(E - cache.energies.mean()):
            if sel.any():
                break
            raise InvalidParameterError(f"no eigenstates near E={E} even after widening")
        width *= 2
        warnings.warn(f"microcanonical window widened to {width:.4g}", RuntimeWarning, stacklevel=2)
    return np.mean(d[sel], axis=0)


def invert_energy_to_temperature(cache: SpectrumCache, E: float, tol: float = 1e-6) -> float:
    """Temperature at which the canonical energy density equals E/L (bisection in log T)."""
    eps = E / cache.L
    eps_inf = canonical_energy_density(cache, np.inf)
    eps_0 = cache.ground_energy_density()
    if not eps_0 < eps < eps_inf:
        raise InvalidParameterError(
            f"energy density {eps:.6g} outside the canonical range ({eps_0:.6g}, {eps_inf:.6g})"
        )
    lo, hi = -12.0, 0.0
    while canonical_energy_density(cache, np.exp(hi)) < eps:
        hi += 2.0
        if hi > 60:
            raise InvalidParameterError("energy too close to the infinite-temperature limit")
    while canonical_energy_density(cache, np.exp(lo)) > eps:
        lo -= 4.0
        if lo < -200:
            raise InvalidParameterError("energy too close to the ground state")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e_mid = canonical_energy_density(cache, np.exp(mid))
        if abs(e_mid - eps) < tol * 1e-3 or hi - lo < 1e-15:
            break
        if e_mid < eps:
            lo = mid
        else:
            hi = mid
    return float(np.exp(mid))
