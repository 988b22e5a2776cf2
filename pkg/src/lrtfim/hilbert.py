"""Basis conventions and matrix-free operators on 2^L dimensional state vectors.

z basis: index b, site i is bit ``L-1-i`` of b (site 0 most significant, matching
``np.kron`` ordering); bit 0 is sz=+1. The x basis is reached with the normalized
Walsh-Hadamard transform, where bit 0 is sx=+1.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


@lru_cache(maxsize=8)
def site_signs(L: int) -> np.ndarray:
    """(2^L, L) int8 table of 1 - 2*bit_i; read as sz in the z basis, sx in the x basis."""
    idx = np.arange(2**L, dtype=np.int64)
    shifts = np.arange(L - 1, -1, -1, dtype=np.int64)
    out = (1 - 2 * ((idx[:, None] >> shifts[None, :]) & 1)).astype(np.int8)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=8)
def magnetization(L: int) -> np.ndarray:
    """sum_i (1 - 2*bit_i) / L for every basis index."""
    idx = np.arange(2**L, dtype=np.int64)
    pop = np.zeros(2**L, dtype=np.int64)
    for i in range(L):
        pop += (idx >> i) & 1
    out = (L - 2 * pop) / L
    out.setflags(write=False)
    return out


def wht(psi: np.ndarray) -> np.ndarray:
    """Normalized Walsh-Hadamard transform along axis 0 (self-inverse)."""
    D = psi.shape[0]
    L = D.bit_length() - 1
    if 2**L != D:
        raise ValueError("leading dimension must be a power of two")
    tail = psi.shape[1:]
    a = np.array(psi, dtype=np.result_type(psi.dtype, np.float64), copy=True)
    for i in range(L):
        a = a.reshape((2**i, 2, 2 ** (L - i - 1)) + tail)
        u = a[:, 0] + a[:, 1]
        a[:, 1] = a[:, 0] - a[:, 1]
        a[:, 0] = u
    return a.reshape(psi.shape) * 2 ** (-L / 2)


def ising_diagonal(Jij: np.ndarray) -> np.ndarray:
    """-sum_{i<j} J_ij sx_i sx_j for every x-basis index."""
    L = Jij.shape[0]
    S = site_signs(L).astype(float)
    return -0.5 * np.einsum("bi,bi->b", S @ Jij, S)


def field_diagonal(L: int, g: float) -> np.ndarray:
    """-g sum_i sz_i for every z-basis index."""
    return -g * L * magnetization(L)


class HamiltonianOperator:
    """Matrix-free H acting on z-basis vectors (or column stacks)."""

    def __init__(self, Jij: np.ndarray, g: float):
        self.L = Jij.shape[0]
        self.dim = 2**self.L
        self.ex = ising_diagonal(Jij)
        self.ez = field_diagonal(self.L, g)

    def __call__(self, psi: np.ndarray) -> np.ndarray:
        ex, ez = self.ex, self.ez
        if psi.ndim == 2:
            ex, ez = ex[:, None], ez[:, None]
        return wht(ex * wht(psi)) + ez * psi


def sparse_hamiltonian(Jij: np.ndarray, g: float) -> sp.csr_matrix:
    """Sparse z-basis H with one off-diagonal per coupled pair (i, j) and row."""
    L = Jij.shape[0]
    D = 2**L
    idx = np.arange(D, dtype=np.int64)
    rows, cols, vals = [idx], [idx], [field_diagonal(L, g)]
    for i in range(L):
        for j in range(i + 1, L):
            if Jij[i, j] == 0:
                continue
            mask = (1 << (L - 1 - i)) | (1 << (L - 1 - j))
            rows.append(idx)
            cols.append(idx ^ mask)
            vals.append(np.full(D, -Jij[i, j]))
    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(D, D)
    )
    H.sum_duplicates()
    return H


def reverse_bits(idx: np.ndarray, L: int) -> np.ndarray:
    out = np.zeros_like(idx)
    for i in range(L):
        out |= ((idx >> i) & 1) << (L - 1 - i)
    return out


@dataclass
class Sector:
    """Orthonormal basis (columns of ``Q``) of one symmetry sector, as a sparse D x d matrix."""

    label: str
    Q: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.Q.shape[1]


def symmetry_sectors(L: int, mirror: bool) -> list[Sector]:
    """Z2 parity (prod sz) sectors, each split by site reflection when ``mirror``."""
    D = 2**L
    idx = np.arange(D, dtype=np.int64)
    parity = np.zeros(D, dtype=np.int64)
    for i in range(L):
        parity ^= (idx >> i) & 1
    sectors = []
    for p in (0, 1):
        members = idx[parity == p]
        if not mirror:
            Q = sp.csr_matrix(
                (np.ones(members.size), (members, np.arange(members.size))), shape=(D, members.size)
            )
            sectors.append(Sector(f"P{'+-'[p]}", Q))
            continue
        rev = reverse_bits(members, L)
        fixed = members[members == rev]
        pair_lo = members[members < rev]
        pair_hi = reverse_bits(pair_lo, L)
        h = 1 / np.sqrt(2)
        # even under reflection: fixed points plus symmetric pair combinations
        n_even = fixed.size + pair_lo.size
        r = np.concatenate([fixed, pair_lo, pair_hi])
        c = np.concatenate([np.arange(fixed.size), fixed.size + np.arange(pair_lo.size),
                            fixed.size + np.arange(pair_lo.size)])
        v = np.concatenate([np.ones(fixed.size), np.full(pair_lo.size, h), np.full(pair_lo.size, h)])
        sectors.append(Sector(f"P{'+-'[p]}R+", sp.csr_matrix((v, (r, c)), shape=(D, n_even))))
        n_odd = pair_lo.size
        if n_odd:
            r = np.concatenate([pair_lo, pair_hi])
            c = np.concatenate([np.arange(n_odd), np.arange(n_odd)])
            v = np.concatenate([np.full(n_odd, h), np.full(n_odd, -h)])
            sectors.append(Sector(f"P{'+-'[p]}R-", sp.csr_matrix((v, (r, c)), shape=(D, n_odd))))
    return sectors
