import numpy as np
import pytest

from analysis.errors import IntegrationError, SpecError
from analysis.experiment_schedules import build_schedule
from analysis.fit_pipeline import extract_t1
from analysis.noise_bath import (
    FluctuatorEnsembleSpec,
    HybridNoiseModel,
    memory_grid,
    ohmic_spectrum_at,
    rtn_coherence,
    sample_fluctuators,
)
from analysis.pulse_control import IdleSegment, PulseProgram, program_propagator
from analysis.redfield_engine import (
    PropagationOptions,
    build_history,
    harmonic_components,
    lag_count,
    lambda_from_series,
    lambda_operator_at,
    lambda_series,
    propagate_map,
    propagate_trajectory,
    run_ensemble,
    state_fidelity,
    trajectory_seed,
)
from analysis.transmon_spectrum import coupling_operators
from utils.config_loader import RunConfig

S = 1.0 / np.sqrt(2.0)
PLUS = np.array([S, S], dtype=complex)


def _rho(psi, d):
    v = np.zeros(d, dtype=complex)
    v[: len(psi)] = psi
    return np.outer(v, v.conj())


def _idle(duration):
    return PulseProgram((IdleSegment(duration),))


def _xy4(spectrum, cycles=1):
    env = RunConfig().envelope(spectrum)
    return build_schedule("dd", 280.0 * cycles, env, cycle_ns=280.0)


def test_state_fidelity_examples():
    rho = _rho(PLUS, 4)
    assert state_fidelity(rho, PLUS) == pytest.approx(1.0)
    assert state_fidelity(rho, np.array([1.0, 0.0])) == pytest.approx(0.5)
    mixed = np.diag([0.5, 0.3, 0.2, 0.0])
    assert state_fidelity(mixed, np.array([0.0, 1.0])) == pytest.approx(0.3)


def test_trajectory_seeds_are_pairs():
    assert trajectory_seed(1234, 7) == (1234, 7)


def test_harmonic_split_reassembles(quito_spectrum):
    a_x, a_z = coupling_operators(quito_spectrum)
    for op in (a_x, a_z):
        parts = harmonic_components(op)
        np.testing.assert_allclose(sum(parts.values()), op, atol=1e-12)
    # cos(phi) keeps parity, n flips it
    assert 0 in harmonic_components(a_z)
    assert all(m % 2 == 0 for m in harmonic_components(a_z))
    assert all(m % 2 == 1 for m in harmonic_components(a_x))


def test_lag_count_bounds():
    assert lag_count(5.0, 0.1, 1000) == 50
    assert lag_count(5.0, 0.1, 20) == 20
    assert lag_count(1e-6, 0.1, 1000) == 1


def test_history_of_idle_is_diagonal(quito_spectrum):
    history = build_history(quito_spectrum, _idle(10.0), 0.1)
    assert history.n_steps == 100
    u = history.unitaries[-1]
    np.testing.assert_allclose(np.abs(np.diag(u)), 1.0)
    np.testing.assert_allclose(u[:2, :2], np.eye(2), atol=1e-12)


def test_history_matches_closed_system_propagator(quito_spectrum):
    program = _xy4(quito_spectrum)
    history = build_history(quito_spectrum, program, 0.1)
    np.testing.assert_allclose(history.unitaries[-1], program_propagator(program, quito_spectrum), atol=1e-9)


def test_schedule_must_fit_the_grid(qubit_spectrum):
    with pytest.raises(SpecError):
        build_history(qubit_spectrum, _idle(10.05), 0.1)


def test_lambda_vanishes_at_start(qubit_spectrum, quito_noise):
    history = build_history(qubit_spectrum, _idle(5.0), 0.1)
    corr, _ = memory_grid(quito_noise.x, 5.0)
    lam = lambda_operator_at(0.0, "x", history, corr)
    np.testing.assert_array_equal(lam, np.zeros((2, 2)))


def test_lambda_of_static_dephasing_is_correlation_integral(qubit_spectrum, quito_noise):
    spec = quito_noise.z
    history = build_history(qubit_spectrum, _idle(20.0), 0.1)
    corr, _ = memory_grid(spec, 20.0)
    lam = lambda_operator_at(20.0, "z", history, corr, memory_cutoff=20.0)
    taus = np.linspace(0.0, 20.0, 200001)
    integral = np.trapz(corr.at(taus), taus)
    _, a_z = coupling_operators(qubit_spectrum)
    np.testing.assert_allclose(lam, a_z * integral, rtol=1e-6, atol=1e-9 * abs(integral))


def test_lambda_series_matches_direct_quadrature(quito_spectrum, quito_noise):
    history = build_history(quito_spectrum, _xy4(quito_spectrum), 0.1)
    a_x, _ = coupling_operators(quito_spectrum)
    channel = lambda_series(history, "x", quito_noise.x, a_x)
    cutoff = channel.n_lags * history.h
    for n in (10, 1500, history.n_steps):
        fft = lambda_from_series(history, channel, n)
        direct = lambda_operator_at(n * history.h, "x", history, channel.corr, memory_cutoff=cutoff)
        scale = np.max(np.abs(direct))
        np.testing.assert_allclose(fft, direct, atol=1e-9 * scale)


def test_lambda_needs_history_and_range(qubit_spectrum, quito_noise):
    corr, _ = memory_grid(quito_noise.x, 5.0)
    with pytest.raises(SpecError):
        lambda_operator_at(1.0, "x", None, corr)
    history = build_history(qubit_spectrum, _idle(5.0), 0.1)
    with pytest.raises(SpecError):
        lambda_operator_at(6.0, "x", history, corr)


def test_noiseless_idle_leaves_state_unchanged(quito_spectrum):
    opts = PropagationOptions(dt=0.5, store_instants=(0.0, 50.0, 100.0))
    rho0 = _rho(PLUS, 4)
    out = propagate_map(quito_spectrum, [rho0], _idle(100.0), HybridNoiseModel(), [None], opts)
    for k in range(3):
        np.testing.assert_allclose(out[0, 0, k], rho0, atol=1e-12)


def test_noiseless_dd_follows_closed_system(quito_spectrum):
    program = _xy4(quito_spectrum)
    psi = np.zeros(4, dtype=complex)
    psi[:2] = PLUS
    expected = program_propagator(program, quito_spectrum) @ psi
    out = propagate_map(quito_spectrum, [np.outer(psi, psi.conj())], program, HybridNoiseModel(), [None],
                        PropagationOptions(dt=0.1, adaptive=False))
    np.testing.assert_allclose(out[0, 0, -1], np.outer(expected, expected.conj()), atol=1e-9)


def test_map_is_linear(quito_spectrum, quito_noise):
    program = _xy4(quito_spectrum)
    real = sample_fluctuators(quito_noise.fluctuators, program.duration, (1, 0))
    opts = PropagationOptions(dt=0.1, adaptive=False, store_instants=(140.0, 280.0))
    rho1 = _rho(np.array([1.0, 0.0]), 4)
    rho2 = _rho(np.array([S, 1j * S]), 4)
    mix = 0.3 * rho1 + 0.7 * rho2
    out = propagate_map(quito_spectrum, [rho1, rho2, mix], program, quito_noise, [real], opts)[0]
    np.testing.assert_allclose(out[2], 0.3 * out[0] + 0.7 * out[1], atol=1e-10)


def test_trajectory_stays_physical(quito_spectrum, quito_noise):
    program = _xy4(quito_spectrum, cycles=2)
    real = sample_fluctuators(quito_noise.fluctuators, program.duration, (2, 0))
    opts = PropagationOptions(dt=0.1, adaptive=False, store_instants=(0.0, 280.0, 560.0))
    result = propagate_trajectory(quito_spectrum, _rho(PLUS, 4), program, quito_noise, real, opts)
    assert result.trace_drift < 1e-6
    assert result.hermiticity < 1e-10
    assert result.min_eigenvalue > -1e-4
    assert state_fidelity(result.rho[-1], PLUS) < 1.0


def test_store_instants_outside_schedule(qubit_spectrum):
    opts = PropagationOptions(dt=1.0, store_instants=(50.0,))
    with pytest.raises(SpecError):
        propagate_map(qubit_spectrum, [_rho(PLUS, 2)], _idle(20.0), HybridNoiseModel(), [None], opts)


def test_options_validation():
    with pytest.raises(SpecError):
        PropagationOptions(dt=0.0)
    with pytest.raises(SpecError):
        PropagationOptions(frame="lab")
    with pytest.raises(SpecError):
        PropagationOptions(memory_cutoff=-1.0)


def test_trace_check_reports_the_instant(qubit_spectrum, quito_noise):
    opts = PropagationOptions(dt=1.0, adaptive=False, store_instants=(40.0,), trace_tolerance=-1.0)
    with pytest.raises(IntegrationError) as info:
        propagate_map(qubit_spectrum, [_rho(PLUS, 2)], _idle(40.0), quito_noise.x_only(), [None], opts)
    assert info.value.time_ns == pytest.approx(40.0)


def test_failed_ensemble_names_the_trajectory_seed(qubit_spectrum, quito_noise):
    opts = PropagationOptions(dt=1.0, adaptive=False, store_instants=(40.0,), trace_tolerance=-1.0)
    with pytest.raises(IntegrationError) as info:
        run_ensemble(qubit_spectrum, PLUS, _idle(40.0), quito_noise, 3, 7, opts)
    k = info.value.trajectory
    assert k in range(3)
    assert f"seed {trajectory_seed(7, k)}" in str(info.value)
    assert info.value.__cause__.time_ns == pytest.approx(40.0)


def test_ensemble_is_deterministic_across_workers(qubit_spectrum, quito_noise):
    program = _idle(400.0)
    runs = []
    for workers in (1, 3):
        opts = PropagationOptions(dt=1.0, store_instants=(0.0, 200.0, 400.0), workers=workers,
                                  trajectory_chunk=4)
        runs.append(run_ensemble(qubit_spectrum, PLUS, program, quito_noise, 10, 99, opts))
    np.testing.assert_array_equal(runs[0].mean, runs[1].mean)
    np.testing.assert_array_equal(runs[0].half_width, runs[1].half_width)
    assert runs[0].mean[0] == pytest.approx(1.0)
    assert runs[0].mean[-1] < 1.0


def test_ensemble_needs_a_trajectory(qubit_spectrum, quito_noise):
    with pytest.raises(SpecError):
        run_ensemble(qubit_spectrum, PLUS, _idle(10.0), quito_noise, 0, 1, PropagationOptions(dt=1.0))


def test_golden_rule_relaxation(qubit_spectrum, quito_noise):
    noise = quito_noise.x_only()
    instants = tuple(np.arange(0.0, 5001.0, 250.0))
    opts = PropagationOptions(dt=1.0, store_instants=instants)
    curve = run_ensemble(qubit_spectrum, np.array([0.0, 1.0]), _idle(5000.0), noise, 1, 0, opts)
    t1, _ = extract_t1(curve)
    rate = qubit_spectrum.charge_scale**2 * ohmic_spectrum_at(noise.x, qubit_spectrum.qubit_freq)
    assert t1 == pytest.approx(1.0 / rate / 1e3, rel=0.05)


@pytest.mark.slow
def test_telegraph_dephasing_matches_closed_form(qubit_spectrum):
    gamma, b = 0.01, 6.4e-4
    noise = HybridNoiseModel(fluctuators=FluctuatorEnsembleSpec(b=b, gamma_min=gamma, gamma_max=gamma, count=1))
    instants = np.arange(0.0, 601.0, 50.0)
    opts = PropagationOptions(dt=0.5, store_instants=tuple(instants), workers=4)
    curve = run_ensemble(qubit_spectrum, PLUS, _idle(600.0), noise, 600, 2024, opts)
    _, a_z = coupling_operators(qubit_spectrum)
    b_eff = 2.0 * np.pi * b * a_z[0, 0].real
    expected = 0.5 * (1.0 + rtn_coherence(gamma, b_eff, instants))
    assert np.all(np.abs(curve.mean - expected) <= 3.0 * curve.stderr)
