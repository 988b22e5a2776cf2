import numpy as np
import pytest
from scipy.stats import chi2

from lrtfim.errors import InvalidParameterError, UnsupportedModelError
from lrtfim.model import CouplingMatrix, build_ideal_couplings
from lrtfim.montecarlo import (
    SpinConfiguration,
    block_bootstrap,
    enumerate_moments,
    merge_estimates,
    rng_state,
    run_chain,
    sample_configurations,
    u4_from_estimate,
    wolff_update,
)


def inhomogeneous(L, seed=7):
    rng = np.random.default_rng(seed)
    J = np.triu(rng.uniform(0.05, 0.6, (L, L)), 1)
    return CouplingMatrix(J + J.T, "ideal")


def test_rng_is_seed_deterministic():
    a, b = rng_state(42), rng_state(42)
    assert np.array_equal(a, b) and not np.array_equal(a, rng_state(43))


@pytest.mark.parametrize("backend", ["cumulative", "naive"])
@pytest.mark.parametrize("T", [0.5, 1.0, 2.0])
def test_moments_match_enumeration(backend, T):
    c = build_ideal_couplings(8, 0.0)
    exact = enumerate_moments(c, T)
    est = run_chain(c, T, 20000, seed=11, backend=backend)
    for k in ("m2", "m4", "abs_m", "eps"):
        assert abs(est.means[k] - exact[k]) < 4 * est.errors[k] + 1e-12, k
    assert est.energy_audit < 1e-9


def test_inhomogeneous_stationary_distribution():
    """Visit frequencies on L=4 follow Boltzmann weights (chi-square on thinned samples)."""
    c = inhomogeneous(4)
    T = 0.8
    exact = enumerate_moments(c, T)
    for backend in ("cumulative", "naive"):
        trace = sample_configurations(c, T, 400_000, seed=5, backend=backend)[10_000::20]
        counts = np.bincount(trace, minlength=16)
        expected = exact["weights"] * counts.sum()
        stat = np.sum((counts - expected) ** 2 / expected)
        assert stat < chi2.ppf(0.999, 15), backend


def test_wolff_update_keeps_energy_consistent():
    c = inhomogeneous(10)
    rng = rng_state(1)
    cfg = SpinConfiguration.from_spins(np.ones(10), c)
    for _ in range(200):
        cfg, size = wolff_update(cfg, c, 1.3, rng)
        assert 1 <= size <= 10
    assert cfg.energy == pytest.approx(cfg.recomputed_energy(c), abs=1e-10)


def test_same_seed_same_chain():
    c = build_ideal_couplings(12, 2.0)
    a = run_chain(c, 1.0, 500, seed=9)
    b = run_chain(c, 1.0, 500, seed=9)
    assert a.means == b.means and a.errors == b.errors


def test_rejects_antiferromagnet_and_bad_temperature():
    J = np.array([[0, -1.0], [-1.0, 0]])
    with pytest.raises(UnsupportedModelError):
        run_chain(CouplingMatrix(J), 1.0, 200)
    with pytest.raises(InvalidParameterError):
        run_chain(build_ideal_couplings(4, 0.0), 0.0, 200)
    with pytest.raises(InvalidParameterError):
        run_chain(build_ideal_couplings(4, 0.0), 1.0, 200, backend="metropolis")


def test_binder_against_enumeration():
    c = build_ideal_couplings(10, 3.0)
    for T in (0.6, 1.5):
        ex = enumerate_moments(c, T)
        u_exact = 1 - ex["m4"] / (3 * ex["m2"] ** 2)
        est = run_chain(c, T, 20000, seed=3)
        u, du = u4_from_estimate(est)
        assert abs(u - u_exact) < 4 * du


def test_block_bootstrap_error_of_iid_data():
    rng = np.random.default_rng(0)
    x = rng.normal(size=64_000)
    _, err = block_bootstrap({"x": x}, seed=1)
    assert err["x"] == pytest.approx(1 / np.sqrt(x.size), rel=0.2)


def test_merge_estimates_weights():
    c = build_ideal_couplings(8, 0.0)
    ests = [run_chain(c, 1.0, 4000, seed=s) for s in range(3)]
    merged = merge_estimates(ests)
    m, e = merged["m2"]
    assert min(x.means["m2"] for x in ests) <= m <= max(x.means["m2"] for x in ests)
    assert e < min(x.errors["m2"] for x in ests)
