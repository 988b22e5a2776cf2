"""Observables that are diagonal in either the x or the z basis.

An observable is evaluated from the probability vector (or a stack of them as
columns) in its own basis; evaluation is linear in the probabilities, which is
what the ensemble code relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .hilbert import magnetization, site_signs, wht


@dataclass(frozen=True)
class Observable:
    name: str
    basis: str  # "x" or "z"
    diagonal: Callable[[int], np.ndarray]

    def evaluate(self, probs: np.ndarray) -> np.ndarray:
        L = probs.shape[0].bit_length() - 1
        return self.diagonal(L) @ probs


def _sx2(L):
    return magnetization(L) ** 2


def _sx4(L):
    return magnetization(L) ** 4


OBSERVABLES = {
    "sx2": Observable("sx2", "x", _sx2),
    "sx4": Observable("sx4", "x", _sx4),
    "mx": Observable("mx", "x", magnetization),
    "sz": Observable("sz", "z", magnetization),
}


def get_observable(obs) -> Observable:
    if isinstance(obs, Observable):
        return obs
    try:
        return OBSERVABLES[obs]
    except KeyError:
        raise KeyError(f"unknown observable {obs!r}; known: {sorted(OBSERVABLES)}") from None


def basis_probabilities(psi: np.ndarray, basis: str) -> np.ndarray:
    """|<b|psi>|^2 in the requested basis; works column-wise for 2D input."""
    amp = wht(psi) if basis == "x" else psi
    return np.abs(amp) ** 2


def correlation_matrix(probs_x: np.ndarray) -> np.ndarray:
    """<sx_i sx_j> from x-basis probabilities (L x L, or L x L x k for column stacks)."""
    L = probs_x.shape[0].bit_length() - 1
    S = site_signs(L).astype(float)
    if probs_x.ndim == 1:
        return S.T @ (probs_x[:, None] * S)
    return np.einsum("bi,bk,bj->ijk", S, probs_x, S, optimize=True)


def expectation(psi: np.ndarray, obs) -> np.ndarray:
    o = get_observable(obs)
    return o.evaluate(basis_probabilities(psi, o.basis))
