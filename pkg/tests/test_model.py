import functools
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrtfim.errors import CapabilityError, InvalidParameterError, InvalidSizeError
from lrtfim.model import (
    CouplingMatrix,
    ModelSpec,
    ProductState,
    build_ideal_couplings,
    build_unnormalized_couplings,
    classical_energies,
    distance_profile,
    kac_normalization,
    kac_rescale,
    product_state_energy,
    product_state_energy_variance,
    select_initial_states,
)

SX = np.array([[0, 1], [1, 0]], float)
SZ = np.diag([1.0, -1.0])


@functools.lru_cache(maxsize=None)
def _site_op_cached(name, i, L):
    op = SX if name == "x" else SZ
    out = np.ones((1, 1))
    for k in range(L):
        out = np.kron(out, op if k == i else np.eye(2))
    out.setflags(write=False)
    return out


def site_op(op, i, L):
    """Dense single-site operator built from explicit Kronecker products."""
    if op is SX or op is SZ:
        return _site_op_cached("x" if op is SX else "z", i, L)
    out = np.ones((1, 1))
    for k in range(L):
        out = np.kron(out, op if k == i else np.eye(2))
    return out


def dense_h(Jij, g):
    L = Jij.shape[0]
    H = np.zeros((2**L, 2**L))
    for i, j in itertools.combinations(range(L), 2):
        H -= Jij[i, j] * site_op(SX, i, L) @ site_op(SX, j, L)
    for i in range(L):
        H -= g * site_op(SZ, i, L)
    return H


def x_product_vector(spins):
    psi = np.ones(1)
    for s in spins:
        psi = np.kron(psi, np.array([1.0, s]) / np.sqrt(2))
    return psi


def test_kac_gamma_zero_is_half_L():
    for L in range(2, 65):
        assert kac_normalization(L, 0.0) == pytest.approx(L / 2, abs=1e-12)


def test_kac_against_double_sum():
    L, gamma = 9, 3.7
    brute = sum(np.exp(-gamma / L * (j - i)) for i in range(L) for j in range(i + 1, L)) / (L - 1)
    assert kac_normalization(L, gamma) == pytest.approx(brute, rel=1e-14)


def test_kac_rejects_bad_input():
    with pytest.raises(InvalidSizeError):
        kac_normalization(1, 0.0)
    with pytest.raises(InvalidParameterError):
        kac_normalization(5, -1.0)


def test_ideal_couplings_shape_and_sum():
    c = build_ideal_couplings(10, 4.0)
    assert c.provenance == "ideal" and c.L == 10
    # sum_{i<j} J_ij = J (L-1) / 2 by construction
    assert np.triu(c.J, 1).sum() == pytest.approx(9 / 2, rel=1e-13)
    prof = distance_profile(c)
    assert np.all(np.diff(prof) < 0)


def test_unnormalized_rescaled_matches_ideal_at_13():
    for gamma in (0.0, 2.0, 10.8):
        a = kac_rescale(build_unnormalized_couplings(13, gamma))
        b = build_ideal_couplings(13, gamma)
        np.testing.assert_allclose(a.J, b.J, rtol=1e-13)


def test_coupling_validation():
    with pytest.raises(InvalidParameterError):
        CouplingMatrix(np.array([[0, 1], [2, 0.0]]))
    with pytest.raises(InvalidParameterError):
        CouplingMatrix(np.eye(2))
    with pytest.raises(InvalidSizeError):
        CouplingMatrix(np.zeros((2, 3)))


def test_coupling_csv_roundtrip(tmp_path):
    c = build_ideal_couplings(6, 2.5)
    p = c.to_csv(tmp_path / "c.csv")
    assert p.read_text().startswith("# schema-version: 1")
    back = CouplingMatrix.from_csv(p)
    np.testing.assert_array_equal(back.J, c.J)
    assert back.gamma == c.gamma and back.provenance == c.provenance
    assert (tmp_path / "c.json").exists()


def test_product_state_string_roundtrip():
    s = ProductState.from_string("ududd@0.1")
    assert s.to_string() == "ududd@0.1" and s.L == 5
    assert ProductState.from_string("uud") == ProductState(np.array([1, 1, -1]))
    with pytest.raises(InvalidParameterError):
        ProductState.from_string("uxd")


@pytest.mark.parametrize("L", range(2, 11))
def test_energy_and_variance_against_dense(L):
    rng = np.random.default_rng(L)
    c = build_ideal_couplings(L, 3.0)
    g = 0.37
    model = ModelSpec(c, g)
    H = dense_h(model.Jij, g)
    for _ in range(3):
        spins = rng.choice([-1, 1], size=L)
        psi = x_product_vector(spins)
        E = psi @ H @ psi
        var = psi @ H @ H @ psi - E**2
        st_ = ProductState(spins)
        assert product_state_energy(st_, model) == pytest.approx(E, abs=1e-12)
        assert product_state_energy_variance(st_, model) == pytest.approx(g**2 * L, abs=1e-12)
        assert var == pytest.approx(g**2 * L, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from([-1, 1]), min_size=2, max_size=12), st.floats(0, 20))
def test_spin_flip_symmetry(spins, gamma):
    model = ModelSpec(build_ideal_couplings(len(spins), gamma), 0.2)
    s = ProductState(np.array(spins))
    assert product_state_energy(s, model) == product_state_energy(s.flipped(), model)


def test_energy_extensivity():
    def eps(L):
        m = ModelSpec(build_ideal_couplings(L, 10.8))
        return product_state_energy(ProductState.polarized(L), m) / L

    assert abs(eps(64) - eps(32)) < abs(eps(16) - eps(8))


def test_classical_energies_match_direct():
    L = 7
    m = ModelSpec(build_ideal_couplings(L, 5.0), 0.0)
    E = classical_energies(m.Jij)
    for idx in (0, 5, 77, 127):
        bits = [(idx >> (L - 1 - i)) & 1 for i in range(L)]
        s = ProductState(np.array([1 if b else -1 for b in bits]))
        assert E[idx] == pytest.approx(product_state_energy(s, m), abs=1e-13)


def test_lowest_target_is_polarized():
    m = ModelSpec(build_ideal_couplings(7, 10.8), 0.24)
    picks = select_initial_states(m, 5)
    assert picks[0][0].to_string() == "ddddddd"


@pytest.mark.parametrize("L,gamma", [(4, 0.0), (6, 3.0), (9, 10.8), (10, 1.0)])
def test_selection_optimal_against_enumeration(L, gamma):
    m = ModelSpec(build_ideal_couplings(L, gamma), 0.1)
    picks = select_initial_states(m, 7, E_max=0.0)
    states = [ProductState(np.array(s)) for s in itertools.product([-1, 1], repeat=L)]
    energies = np.array([product_state_energy(s, m) for s in states])
    E_min = product_state_energy(ProductState.polarized(L), m)
    targets = np.linspace(E_min, 0.0, 7)
    optimum = [np.min(np.abs(energies - t)) for t in targets]
    picked_E = np.array([E for _, E in picks])
    # every target is served at the exhaustive optimum, and every pick serves some target
    for t, best in zip(targets, optimum):
        assert np.min(np.abs(np.abs(picked_E - t) - best)) < 1e-12
    for s, E in picks:
        assert E == pytest.approx(product_state_energy(s, m), abs=1e-12)
        assert any(abs(abs(E - t) - b) < 1e-12 for t, b in zip(targets, optimum))
    assert len({s for s, _ in picks}) == len(picks)


def test_ties_go_to_lexicographically_smallest():
    # gamma = 0: every single flip has the same energy; 'd' < 'u' so the flip sits at the last site
    m = ModelSpec(build_ideal_couplings(6, 0.0), 0.0)
    one_flip = product_state_energy(ProductState.from_string("dddddu"), m)
    E_min = product_state_energy(ProductState.polarized(6), m)
    picks = select_initial_states(m, 2, E_max=one_flip)
    assert [s.to_string() for s, _ in picks] == ["dddddd", "dddddu"]
    assert E_min < one_flip


def test_selection_cap_and_heuristic():
    m = ModelSpec(build_ideal_couplings(12, 2.0), 0.1)
    with pytest.raises(CapabilityError):
        select_initial_states(m, 3, exhaustive_cap=10)
    picks = select_initial_states(m, 3, exhaustive_cap=10, heuristic=True)
    exact = select_initial_states(m, 3)
    E_min = product_state_energy(ProductState.polarized(12), m)
    for (_, Eh), t in zip(picks, np.linspace(E_min, 0, 3)):
        assert abs(Eh - t) < 0.5
    assert exact[0][0] == picks[0][0]


def test_selection_rejects_bad_window():
    m = ModelSpec(build_ideal_couplings(5, 1.0))
    with pytest.raises(InvalidParameterError):
        select_initial_states(m, 3, E_max=-100.0)
    with pytest.raises(InvalidParameterError):
        select_initial_states(m, 0)
