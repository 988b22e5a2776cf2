import numpy as np
import pytest

from lrtfim.errors import (
    ConvergenceError,
    InvalidParameterError,
    NearResonanceError,
    SizeMismatchError,
    ZigzagInstabilityError,
)
from lrtfim.ionchain import (
    KE2,
    PRESETS,
    TRAP_15,
    TRAP_27,
    TWO_PI,
    UM,
    BeamConfig,
    TrapConfig,
    calibrate_to_target,
    compute_radial_modes,
    mode_detunings,
    preset_couplings,
    solve_equilibrium_positions,
    synthesize_couplings,
)
from lrtfim.model import build_ideal_couplings


@pytest.fixture(scope="module")
def spec15():
    return compute_radial_modes(solve_equilibrium_positions(TRAP_15), TRAP_15)


def test_two_ion_balance():
    trap = TrapConfig(2, c2=0.11)
    x = solve_equilibrium_positions(trap)
    d = (x[1] - x[0]) * UM
    # k e^2 / d^2 = dV/dx at x = d/2 = c2 d
    assert d == pytest.approx((KE2 / trap.c2_si) ** (1 / 3), rel=1e-10)
    assert x[0] == pytest.approx(-x[1], abs=1e-12)


def test_two_ion_modes():
    trap = TrapConfig(2, c2=0.11)
    x = solve_equilibrium_positions(trap)
    spec = compute_radial_modes(x, trap)
    K = KE2 / (trap.mass_kg * ((x[1] - x[0]) * UM) ** 3)
    np.testing.assert_allclose(spec.frequencies, [trap.omega1, np.sqrt(trap.omega1**2 - 2 * K)], rtol=1e-12)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(spec.participation, [[s, s], [s, -s]], atol=1e-12)


def test_lab_trap_spacing(spec15):
    d = np.diff(spec15.positions)
    central = d[d.size // 2 - 1: d.size // 2 + 1].mean()
    assert central == pytest.approx(3.75, rel=0.05)
    np.testing.assert_allclose(spec15.positions, -spec15.positions[::-1], atol=1e-6)
    assert np.all(d > 0)


def test_flat_center_27():
    d = np.diff(solve_equilibrium_positions(TRAP_27))
    central = d[3:-3]
    assert np.max(np.abs(central / central.mean() - 1)) < 0.03


def test_mode_spectrum_invariants(spec15):
    b = spec15.participation
    N = spec15.N
    np.testing.assert_allclose(b.T @ b, np.eye(N), atol=1e-10)
    np.testing.assert_allclose(b[:, 0], 1 / np.sqrt(N), atol=1e-8)
    assert spec15.frequencies[0] == pytest.approx(TRAP_15.omega1, rel=1e-12)
    assert np.all(np.diff(spec15.frequencies) < 0)
    assert np.sum(spec15.frequencies**2) == pytest.approx(np.trace(spec15.hessian), rel=1e-12)


def test_gradient_is_zero_at_solution():
    from lrtfim.ionchain import _grad_hess, _scaled_coefficients

    for trap in (TRAP_15, TRAP_27):
        u = solve_equilibrium_positions(trap)
        g, H = _grad_hess(u, *_scaled_coefficients(trap))
        assert np.linalg.norm(g) < 1e-9
        assert np.linalg.eigvalsh(H)[0] > 0


def test_solver_errors():
    with pytest.raises(ConvergenceError) as info:
        solve_equilibrium_positions(TRAP_27, max_iter=1)
    assert info.value.residual > 0
    with pytest.raises(InvalidParameterError):
        TrapConfig(10, c2=-0.1, c4=0.0)
    with pytest.raises(InvalidParameterError):
        TrapConfig(1, c2=0.1)


def test_zigzag_instability():
    weak = TrapConfig(15, c2=0.11, c4=1.6e3, omega1=TWO_PI * 0.3e6)
    with pytest.raises(ZigzagInstabilityError):
        compute_radial_modes(solve_equilibrium_positions(weak), weak)


def test_single_mode_sign():
    # two ions in a stiff trap (mode splitting ~ 23 kHz), drive 2 kHz from the rocking mode:
    # the dispersive sum is dominated by its 1/(2 D_N) term
    trap = TrapConfig(2, c2=5.0)
    spec = compute_radial_modes(solve_equilibrium_positions(trap), trap)
    assert spec.frequencies[0] - spec.frequencies[1] > TWO_PI * 20e3
    for delta in (-TWO_PI * 2e3, TWO_PI * 2e3):
        beams = BeamConfig((1.0, 1.0), delta, staggered=False)
        D = mode_detunings(spec, delta)
        J12 = synthesize_couplings(spec, beams).J[0, 1]
        eta = 0.08 * spec.participation
        dispersive = sum(eta[0, k] * eta[1, k] / (2 * D[k]) for k in range(2))
        assert J12 == pytest.approx(-dispersive, rel=1e-12)
        # b_0N b_1N = -1/2 for the rocking mode, so the returned coupling follows the sign of D_N
        assert np.sign(J12) == np.sign(D[-1])
        assert abs(J12) == pytest.approx(0.08**2 / 2 / (2 * abs(D[-1])), rel=0.15)


def test_as_printed_convention(spec15):
    D = mode_detunings(spec15, -TWO_PI * 35e3, "as-printed")
    assert np.all(D < -2 * spec15.frequencies[-1])


def test_staggering_is_exact_sign_flip(spec15):
    rabi = PRESETS[13][1].rabi
    on = synthesize_couplings(spec15, BeamConfig(rabi, -TWO_PI * 35e3, staggered=True)).J
    off = synthesize_couplings(spec15, BeamConfig(rabi, -TWO_PI * 35e3, staggered=False)).J
    act = np.flatnonzero(np.asarray(rabi) > 0)
    sign = (-1.0) ** (act[:, None] + act[None, :])
    np.testing.assert_array_equal(on, off * sign)


def test_masking_equals_deleting(spec15):
    full = synthesize_couplings(spec15, BeamConfig((1.0,) * 15, -TWO_PI * 35e3)).J
    rabi = [1.0] * 15
    rabi[4] = 0.0
    masked = synthesize_couplings(spec15, BeamConfig(tuple(rabi), -TWO_PI * 35e3)).J
    keep = [i for i in range(15) if i != 4]
    np.testing.assert_array_equal(masked, full[np.ix_(keep, keep)])


def test_parity_of_uniform_beams(spec15):
    J = synthesize_couplings(spec15, BeamConfig((1.0,) * 15, -TWO_PI * 35e3)).J
    np.testing.assert_allclose(J, J[::-1, ::-1], rtol=0, atol=1e-6 * np.abs(J).max())


def test_far_detuned_limit(spec15):
    width = spec15.frequencies[0] - spec15.frequencies[-1]

    def offdiag(delta):
        J = synthesize_couplings(spec15, BeamConfig((1.0,) * 15, delta, staggered=False)).J
        return np.abs(J).max() * abs(delta)

    # J_offdiag * |Delta| -> 0 like 1/Delta
    a, b = offdiag(-100 * width), offdiag(-1000 * width)
    assert b < a / 5


def test_resonance_guard(spec15):
    with pytest.raises(NearResonanceError):
        synthesize_couplings(spec15, BeamConfig((1.0,) * 15, -TWO_PI * 0.5e3))


def test_beam_validation(spec15):
    with pytest.raises(InvalidParameterError):
        BeamConfig((1.0, 0.0, 0.0), -1.0)
    with pytest.raises(InvalidParameterError):
        BeamConfig((1.0, -1.0), -1.0)
    with pytest.raises(SizeMismatchError):
        synthesize_couplings(spec15, BeamConfig((1.0, 1.0), -TWO_PI * 35e3))


def test_calibration_homogeneous():
    c = build_ideal_couplings(8, 10.8)
    J1, n1 = calibrate_to_target(c)
    J3, n3 = calibrate_to_target(c.scaled(3.0))
    assert J3 == pytest.approx(3 * J1)
    np.testing.assert_allclose(n1.J, n3.J, rtol=1e-14)
    i, j = np.unravel_index(np.argmax(c.J), c.J.shape)
    assert abs(i - j) == 1
    with pytest.raises(InvalidParameterError):
        calibrate_to_target(c.scaled(0.0))


def test_l13_matrix_shape():
    J = preset_couplings(13)
    assert J.L == 13 and J.provenance == "ion-derived"
    assert J.J.max() == pytest.approx(1.0)
    # decays with distance along every row, away from the diagonal
    for i in range(13):
        right = J.J[i, i + 1:]
        assert np.all(np.diff(right) < 0)


def test_rabi_profile_flattens_row_sums():
    def spread(J):
        r = J.J.sum(axis=1)[3:-3]
        return np.std(r) / np.mean(r)

    assert spread(preset_couplings(23)) < spread(preset_couplings(23, uniform=True))
