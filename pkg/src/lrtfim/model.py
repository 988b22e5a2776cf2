"""Spin model: coupling matrices, x-basis product states and their energies.

Convention used everywhere in the package::

    H = - sum_{i<j} J_ij sx_i sx_j - g sum_i sz_i

with any Kac prefactor already folded into the stored ``J_ij``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csvio import read_csv, write_csv, write_json
from .errors import (
    CapabilityError,
    InvalidParameterError,
    InvalidSizeError,
    SizeMismatchError,
)

log = logging.getLogger(__name__)

PROVENANCES = ("ideal", "unnormalized", "ion-derived")
EXHAUSTIVE_CAP = 26
_DEGENERACY_TOL = 1e-12


@dataclass(frozen=True)
class CouplingMatrix:
    """Symmetric L x L coupling array in units of J with zero diagonal."""

    J: np.ndarray
    provenance: str = "ideal"
    gamma: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        J = np.array(self.J, dtype=float)
        if J.ndim != 2 or J.shape[0] != J.shape[1]:
            raise InvalidSizeError(f"coupling matrix must be square, got shape {J.shape}")
        if not np.allclose(J, J.T, rtol=0, atol=1e-12 * max(1.0, np.abs(J).max(initial=0))):
            raise InvalidParameterError("coupling matrix is not symmetric")
        if np.any(np.diag(J) != 0):
            raise InvalidParameterError("coupling matrix must have zero diagonal")
        if self.provenance not in PROVENANCES:
            raise InvalidParameterError(f"unknown provenance {self.provenance!r}")
        J = 0.5 * (J + J.T)
        J.setflags(write=False)
        object.__setattr__(self, "J", J)

    @property
    def L(self) -> int:
        return self.J.shape[0]

    def scaled(self, factor: float) -> "CouplingMatrix":
        return CouplingMatrix(self.J * factor, self.provenance, self.gamma, dict(self.meta))

    def is_mirror_symmetric(self, rtol: float = 1e-12) -> bool:
        scale = np.abs(self.J).max(initial=0.0)
        return bool(np.allclose(self.J, self.J[::-1, ::-1], rtol=0, atol=rtol * max(scale, 1e-300)))

    def to_csv(self, path) -> Path:
        comments = [f"L: {self.L}, gamma: {self.gamma}, provenance: {self.provenance}"]
        header = [f"j{j}" for j in range(self.L)]
        path = write_csv(path, header, self.J.tolist(), comments)
        write_json(Path(path).with_suffix(".json"), self.metadata())
        return path

    def metadata(self) -> dict:
        return {"L": self.L, "gamma": self.gamma, "provenance": self.provenance, **self.meta}

    @classmethod
    def from_csv(cls, path) -> "CouplingMatrix":
        _, rows, _ = read_csv(path)
        J = np.array([[float(v) for v in row] for row in rows])
        sidecar = Path(path).with_suffix(".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        provenance = meta.pop("provenance", "ideal")
        gamma = meta.pop("gamma", None)
        meta.pop("L", None)
        return cls(J, provenance, gamma, meta)


@dataclass(frozen=True)
class ModelSpec:
    couplings: CouplingMatrix
    g: float = 0.0
    J: float = 1.0

    @property
    def L(self) -> int:
        return self.couplings.L

    @property
    def Jij(self) -> np.ndarray:
        """Couplings entering the Hamiltonian, including the overall energy scale."""
        return self.J * self.couplings.J


@dataclass(frozen=True)
class ProductState:
    """x-basis product state; ``+1`` is |->> ("u"), ``-1`` is |<-> ("d").

    ``tilt`` is a global rotation angle about the y axis applied to every spin.
    """

    spins: np.ndarray
    tilt: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.spins)
        if s.ndim != 1 or s.size == 0:
            raise InvalidSizeError("spins must be a non-empty 1D array")
        if not np.all((s == 1) | (s == -1)):
            raise InvalidParameterError("every spin must be exactly +1 or -1")
        s = s.astype(np.int8)
        s.setflags(write=False)
        object.__setattr__(self, "spins", s)

    @property
    def L(self) -> int:
        return self.spins.size

    def flipped(self) -> "ProductState":
        return ProductState(-self.spins, self.tilt)

    def to_string(self) -> str:
        s = "".join("u" if v > 0 else "d" for v in self.spins)
        return s if self.tilt == 0 else f"{s}@{self.tilt!r}"

    @classmethod
    def from_string(cls, text: str) -> "ProductState":
        spins, _, tilt = text.strip().partition("@")
        bad = set(spins) - {"u", "d"}
        if bad:
            raise InvalidParameterError(f"state string may only contain 'u'/'d', got {sorted(bad)}")
        return cls(np.array([1 if c == "u" else -1 for c in spins]), float(tilt) if tilt else 0.0)

    @classmethod
    def polarized(cls, L: int, up: bool = False) -> "ProductState":
        return cls(np.full(L, 1 if up else -1))

    def __str__(self):
        return self.to_string()

    def __eq__(self, other):
        if not isinstance(other, ProductState):
            return NotImplemented
        return self.tilt == other.tilt and np.array_equal(self.spins, other.spins)

    def __hash__(self):
        return hash((self.spins.tobytes(), self.tilt))


def kac_normalization(L: int, gamma: float) -> float:
    """N = 1/(L-1) * sum_{i<j} exp(-(gamma/L)|i-j|)."""
    if L < 2:
        raise InvalidSizeError(f"Kac normalization needs L >= 2, got {L}")
    if gamma < 0:
        raise InvalidParameterError("gamma must be non-negative")
    d = np.arange(1, L)
    # L - d pairs sit at distance d
    return float(np.sum((L - d) * np.exp(-(gamma / L) * d)) / (L - 1))


def _distance_matrix(L: int) -> np.ndarray:
    idx = np.arange(L)
    return np.abs(idx[:, None] - idx[None, :])


def build_ideal_couplings(L: int, gamma: float, J: float = 1.0) -> CouplingMatrix:
    """Kac-normalized exponentially decaying couplings with decay rate gamma/L."""
    N = kac_normalization(L, gamma)
    Jij = (J / (2 * N)) * np.exp(-(gamma / L) * _distance_matrix(L))
    np.fill_diagonal(Jij, 0.0)
    return CouplingMatrix(Jij, "ideal", float(gamma), {"kac_N": N, "J": J})


def build_unnormalized_couplings(L: int, gamma: float, denominator: float = 13.0) -> CouplingMatrix:
    """exp(-(gamma/denominator)|i-j|) with no size dependence in the exponent or prefactor."""
    if L < 2:
        raise InvalidSizeError(f"need L >= 2, got {L}")
    if denominator <= 0:
        raise InvalidParameterError("denominator must be positive")
    Jij = np.exp(-(gamma / denominator) * _distance_matrix(L))
    np.fill_diagonal(Jij, 0.0)
    return CouplingMatrix(Jij, "unnormalized", float(gamma), {"denominator": denominator})


def kac_rescale(couplings: CouplingMatrix, J: float = 1.0) -> CouplingMatrix:
    """Apply the J/(2N) prefactor with N = sum_{i<j} J_ij / (L-1) computed from the matrix itself.

    For ``build_unnormalized_couplings(13, gamma)`` this reproduces ``build_ideal_couplings(13, gamma)``.
    """
    L = couplings.L
    N = np.triu(couplings.J, 1).sum() / (L - 1)
    if N <= 0:
        raise InvalidParameterError("Kac rescaling needs a positive total coupling")
    return CouplingMatrix(
        couplings.J * (J / (2 * N)), couplings.provenance, couplings.gamma,
        {**couplings.meta, "kac_N": float(N), "J": J},
    )


def distance_profile(couplings: CouplingMatrix) -> np.ndarray:
    """Center-of-mass averaged profile Jbar(l) = 1/(L-l) sum_i J_{i,i+l} for l = 1..L-1."""
    J = couplings.J
    return np.array([np.diagonal(J, l).mean() for l in range(1, couplings.L)])


def _check_size(state: ProductState, model: ModelSpec):
    if state.L != model.L:
        raise SizeMismatchError(f"state has L={state.L} but model has L={model.L}")


def product_state_energy(state: ProductState, model: ModelSpec) -> float:
    """<psi|H|psi> for an untilted x-product state; the field term averages to zero."""
    _check_size(state, model)
    if state.tilt != 0:
        raise InvalidParameterError("closed-form energy only holds for untilted states")
    s = state.spins.astype(float)
    return float(-0.5 * s @ model.Jij @ s)


def product_state_energy_variance(state: ProductState, model: ModelSpec) -> float:
    """Energy variance of an untilted x-product state: only the field term fluctuates, giving g^2 L."""
    _check_size(state, model)
    if state.tilt != 0:
        raise InvalidParameterError("closed-form variance only holds for untilted states")
    return float(model.g**2 * model.L)


def spin_table(L: int, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Rows are spin configurations for indices [start, stop); site 0 is the most significant bit, bit 1 -> +1."""
    stop = 2**L if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(L - 1, -1, -1, dtype=np.int64)
    bits = (idx[:, None] >> shifts[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


def classical_energies(Jij: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
    """-sum_{i<j} J_ij s_i s_j for all 2^L configurations in index order."""
    L = Jij.shape[0]
    out = np.empty(2**L)
    for start in range(0, 2**L, chunk):
        stop = min(start + chunk, 2**L)
        S = spin_table(L, start, stop).astype(float)
        out[start:stop] = -0.5 * np.einsum("bi,bi->b", S @ Jij, S)
    return out


def _state_from_index(L: int, index: int) -> ProductState:
    return ProductState(spin_table(L, index, index + 1)[0])


def _greedy_closest(Jij: np.ndarray, target: float, start: np.ndarray) -> np.ndarray:
    """Single-spin-flip descent on |E - target| starting from ``start``."""
    s = start.astype(float).copy()
    h = Jij @ s
    E = -0.5 * s @ h
    while True:
        # flipping spin k changes E by 2 s_k h_k
        dE = 2 * s * h
        cand = np.abs(E + dE - target)
        k = int(np.argmin(cand))
        if cand[k] >= abs(E - target):
            return s.astype(np.int8)
        E += dE[k]
        h -= 2 * s[k] * Jij[:, k]
        s[k] = -s[k]


def select_initial_states(
    model: ModelSpec,
    n_targets: int,
    E_max: float = 0.0,
    *,
    exhaustive_cap: int = EXHAUSTIVE_CAP,
    heuristic: bool = False,
) -> list[tuple[ProductState, float]]:
    """Pick x-product states whose energies are closest to equally spaced targets.

    Targets span [E_min, E_max] with E_min the fully polarized energy. Exact ties go to the
    lexicographically smallest 'u'/'d' string; repeated picks are dropped.
    """
    if n_targets < 1:
        raise InvalidParameterError("n_targets must be >= 1")
    L = model.L
    Jij = model.Jij
    E_min = product_state_energy(ProductState.polarized(L), model)
    if E_max < E_min:
        raise InvalidParameterError(f"E_max={E_max} is below E_min={E_min}")
    targets = np.linspace(E_min, E_max, n_targets)

    picks: list[tuple[ProductState, float]] = []
    if L > exhaustive_cap:
        if not heuristic:
            raise CapabilityError(
                f"L={L} exceeds the exhaustive-search cap {exhaustive_cap}; pass heuristic=True"
            )
        for t in targets:
            s = _greedy_closest(Jij, t, -np.ones(L))
            st = ProductState(s)
            picks.append((st, product_state_energy(st, model)))
    else:
        energies = classical_energies(Jij)
        for t in targets:
            dist = np.abs(energies - t)
            best = int(np.argmin(dist))
            ties = np.flatnonzero(dist <= dist[best] + _DEGENERACY_TOL * max(1.0, abs(model.J)))
            best = int(ties[0])
            if ties.size > 1:
                log.info(
                    "target %.6g: %d states within tolerance (%s); keeping %s",
                    t,
                    ties.size,
                    ", ".join(_state_from_index(L, int(i)).to_string() for i in ties[:4]),
                    _state_from_index(L, best).to_string(),
                )
            picks.append((_state_from_index(L, best), float(energies[best])))

    seen, out = set(), []
    for st, E in picks:
        if st not in seen:
            seen.add(st)
            out.append((st, E))
    return out
