import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from resreset.errors import EnvelopeTooShort, NonHermitianInput, PoorLinearity
from resreset.qubit import (ALLXY_PAIRS, RHO0, RHO1, SM, SX, SY, SZ, ConstantEnvironment,
                            DetectorCalibration, allxy_error, allxy_ideal, apply_finite_pulse,
                            apply_unitary, calibrate_detector, check_density_matrix, coherence,
                            detector_response, estimate_nbar, evolve_qubit, linear_fit,
                            rotation, run_allxy, steady_drive_amplitude, write_allxy_csv)
from resreset.params import default_params

PLUS = 0.5 * np.array([[1, 1], [1, 1]], dtype=complex)


def lindblad_oracle(rho, duration, p, b_fn, gd_fn, rabi=0.0, phase=0.0):
    """Direct ODE integration of the qubit master equation."""

    def d(op, r):
        return op @ r @ op.conj().T - 0.5 * (op.conj().T @ op @ r + r @ op.conj().T @ op)

    def rhs(t, y):
        r = y.reshape(2, 2)
        h = 0.5 * b_fn(t) * SZ + 0.5 * rabi * (math.cos(phase) * SX + math.sin(phase) * SY)
        dr = -1j * (h @ r - r @ h) + p.gamma1 * d(SM, r) + 0.5 * (p.gamma_phi + gd_fn(t)) * d(SZ, r)
        return dr.reshape(4)

    sol = solve_ivp(rhs, (0, duration), rho.astype(complex).reshape(4), rtol=1e-11, atol=1e-13,
                    method="DOP853")
    return sol.y[:, -1].reshape(2, 2)


def test_relaxation_is_exponential(params):
    r = evolve_qubit(RHO1, params.T1, params)
    assert r[1, 1].real == pytest.approx(math.exp(-1), abs=1e-12)


def test_free_coherence_decay(params):
    t = 7e-6
    r = evolve_qubit(PLUS, t, params)
    # |rho01| decays at 1/T2echo when no photons are present
    assert abs(coherence(r)) == pytest.approx(0.5 * math.exp(-t / params.T2echo), rel=1e-12)


def test_constant_photon_shift_and_dephasing(params):
    b, gd, t = 2 * math.pi * 1.3e6, 4e5, 300e-9
    r = evolve_qubit(PLUS, t, params, lambda s: b + 0 * s, lambda s: gd + 0 * s)
    expect = 0.5 * np.exp(-(params.gamma_phi + gd + 0.5 * params.gamma1) * t + 1j * b * t)
    assert coherence(r) == pytest.approx(expect, rel=1e-12)


def test_time_dependent_stark_phase(params):
    # phase = int B dt for a linear ramp, exact with midpoint averaging
    b0, b1, t = 1e6, 3e13, 200e-9
    r = evolve_qubit(PLUS, t, params, lambda s: b0 + b1 * s)
    assert np.angle(coherence(r)) == pytest.approx(b0 * t + 0.5 * b1 * t * t, abs=1e-10)


def test_driven_evolution_matches_ode_solver(params):
    def b_fn(t):
        return 2 * math.pi * 3e6 * np.exp(-t / 100e-9)

    def gd_fn(t):
        return 2e6 * np.exp(-t / 80e-9)

    rabi = math.pi / 20e-9
    got = evolve_qubit(RHO0, 40e-9, params, b_fn, gd_fn, rabi=rabi, drive_phase=0.4,
                       max_step=0.1e-9)
    ref = lindblad_oracle(RHO0, 40e-9, params, b_fn, gd_fn, rabi, 0.4)
    assert np.max(np.abs(got - ref)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["x", "y"]), st.floats(-2 * math.pi, 2 * math.pi))
def test_finite_pulse_matches_rotation_without_noise(axis, angle):
    p = default_params(T1=math.inf, T2echo=math.inf)
    got = apply_finite_pulse(RHO0, axis, angle, 20e-9, None, 0.0, p)
    ref = apply_unitary(RHO0, rotation(axis, angle))
    assert np.max(np.abs(got - ref)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(0, 2 * math.pi), st.floats(0, 5e-6))
def test_evolution_keeps_a_valid_state(theta, phi, t):
    p = default_params()
    psi = np.array([math.cos(theta * math.pi / 2), np.exp(1j * phi) * math.sin(theta * math.pi / 2)])
    rho = np.outer(psi, psi.conj())
    r = evolve_qubit(rho, t, p, lambda s: 1e7 + 0 * s, lambda s: 1e5 + 0 * s)
    assert np.trace(r).real == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(r, r.conj().T)
    assert np.min(np.linalg.eigvalsh(r)) > -1e-12


def test_non_hermitian_input_rejected(params):
    bad = np.array([[1, 1], [0, 0]], dtype=complex)
    with pytest.raises(NonHermitianInput):
        check_density_matrix(bad)
    with pytest.raises(NonHermitianInput):
        evolve_qubit(bad, 1e-9, params)


def test_allxy_ideal_staircase():
    assert len(ALLXY_PAIRS) == 21
    ideal0 = allxy_ideal(0)
    assert list(ideal0) == [0.0] * 5 + [0.5] * 12 + [1.0] * 4
    assert list(allxy_ideal(1)) == list(1 - ideal0)


@pytest.mark.parametrize("state", [0, 1])
def test_allxy_without_errors_is_ideal(ideal_params, state):
    res = run_allxy(state, None, 0.0, ideal_params)
    assert np.max(np.abs(res.f1 - res.ideal)) < 1e-12
    assert allxy_error(res) < 1e-12


def test_allxy_detects_detuning(ideal_params):
    small = allxy_error(run_allxy(0, ConstantEnvironment(b=2 * math.pi * 0.5e6), 0.0, ideal_params))
    large = allxy_error(run_allxy(0, ConstantEnvironment(b=2 * math.pi * 2e6), 0.0, ideal_params))
    assert 0 < small < large


def test_allxy_needs_enough_envelope(params):
    env = ConstantEnvironment(b=1e6, t_min=0.0, t_max=30e-9)
    with pytest.raises(EnvelopeTooShort):
        run_allxy(0, env, 0.0, params)


def test_allxy_csv(tmp_path, ideal_params):
    res = run_allxy(0, None, 0.0, ideal_params)
    write_allxy_csv(tmp_path / "a.csv", res)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert len(lines) == 22


def test_steady_drive_amplitude_formula(params):
    f = params.f_r0 + 2e6
    eps = steady_drive_amplitude(3.0, f, 0, params)
    delta = 2 * math.pi * 2e6
    assert eps ** 2 == pytest.approx(3.0 * (delta ** 2 + 0.25 * params.kappa ** 2))


def test_detector_response_grows_with_photons(params):
    f = 0.5 * (params.f_r0 + params.f_r1)
    e = [detector_response(n, 0, params, f)[1] for n in (0.0, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(e, e[1:]))


def test_linear_fit():
    a, b, r2 = linear_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert (a, b, r2) == pytest.approx((2.0, 1.0, 1.0))


def test_calibration_inverts_within_sensitivity(params):
    cal = calibrate_detector(params, nbar_grid=np.linspace(0, 4, 5), states=(0,))
    assert cal.r_squared[0] >= 0.98
    assert cal.delta_nbar(0) == pytest.approx(0.3)
    f = 0.5 * (params.f_r0 + params.f_r1)
    n_end, e = detector_response(2.5, 0, params, f)
    est = estimate_nbar(e, cal, 0)
    assert abs(est.nbar - n_end) < cal.delta_nbar(0)
    assert DetectorCalibration.from_dict(cal.to_dict()) == cal


def test_estimate_flags():
    cal = DetectorCalibration({0: 0.1}, {0: 0.01}, {0: 1.0}, 4.0, {0: 0.03})
    assert estimate_nbar(0.0, cal, 0).underflow
    assert estimate_nbar(0.0, cal, 0).nbar == 0.0
    assert estimate_nbar(0.6, cal, 0).saturated
    assert estimate_nbar(0.21, cal, 0).nbar == pytest.approx(2.0)


def test_calibration_rejects_poor_linearity(params):
    with pytest.raises(PoorLinearity):
        calibrate_detector(params, nbar_grid=[0.0, 10.0, 20.0, 30.0], states=(0,), min_r2=0.99)


def test_calibration_grid_range(params):
    with pytest.raises(ValueError):
        calibrate_detector(params, nbar_grid=[0.0, 40.0])
