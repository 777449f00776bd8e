import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stm_rydberg import atomic
from stm_rydberg.atomic import (DriveSet, Detunings, Envelope, LadderConfig, build_hamiltonian,
                                from_real, ground_state, integrate_rk4, liouvillian,
                                master_rhs, max_step, propagate, to_real)
from stm_rydberg.constants import AMU, K_B, TWO_PI
from stm_rydberg.errors import (InvalidParameterError, NumericalInstabilityError,
                                StepSizeError)

OMEGA_P = TWO_PI * 6.17e6
OMEGA_C = TWO_PI * 11.07e6
OMEGA_RF = TWO_PI * 17.11e6


def random_density(rng, batch=()):
    a = rng.normal(size=batch + (4, 4)) + 1j * rng.normal(size=batch + (4, 4))
    rho = a @ np.conj(np.swapaxes(a, -1, -2))
    return rho / np.trace(rho, axis1=-2, axis2=-1)[..., None, None]


def torrey_excited(t, omega, gamma):
    """Resonant two-level excited population with radiative damping only."""
    lam = math.sqrt(omega**2 - gamma**2 / 16)
    envelope = np.exp(-0.75 * gamma * t) * (np.cos(lam * t) + 0.75 * gamma / lam * np.sin(lam * t))
    return omega**2 / (2 * omega**2 + gamma**2) * (1 - envelope)


# ---------------------------------------------------------------------------
# configuration


def test_transit_rate_geometry():
    cfg = LadderConfig()
    mean_speed = math.sqrt(8 * K_B * 295 / (math.pi * 84.911789732 * AMU))
    expected = mean_speed / (190e-6 * math.sqrt(2 * math.log(2)))
    assert cfg.transit_rate == pytest.approx(expected, rel=1e-12)
    assert cfg.transit_rate / TWO_PI == pytest.approx(194e3, rel=0.02)


def test_transit_rate_override_and_zero():
    assert LadderConfig(transit_rate=0.0).transit_rate == 0.0
    with pytest.raises(InvalidParameterError):
        LadderConfig(transit_rate=-1.0)


@pytest.mark.parametrize("kwargs", [{"gamma_21": 0.0}, {"dipole_d43": -1.0},
                                    {"dephasing_gamma": (0.0, -1.0, 0.0)},
                                    {"dephasing_gamma": (0.0, 0.0)},
                                    {"temperature": float("nan")}])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(InvalidParameterError):
        LadderConfig(**kwargs)


def test_rabi_field_round_trip():
    cfg = LadderConfig()
    for tr in ("21", "32", "43"):
        e = cfg.field_from_rabi(tr, OMEGA_RF)
        assert cfg.rabi_from_field(tr, e) == pytest.approx(OMEGA_RF, rel=1e-14)
    # 17.11 MHz on the RF transition needs about 0.974 V/m
    assert cfg.field_from_rabi("43", OMEGA_RF) == pytest.approx(0.974, rel=2e-3)


def test_detuning_combinations():
    d = Detunings(1.0, 2.0, 5.0)
    assert d.two_photon == 3.0
    assert d.three_photon == -2.0
    assert d.max_abs() == 5.0
    assert Detunings(np.zeros(3), 0.0, np.zeros((2, 1))).shape == (2, 3)
    with pytest.raises(InvalidParameterError):
        Detunings(np.inf)


# ---------------------------------------------------------------------------
# envelopes


def test_pulse_train_values():
    env = Envelope.pulse_train(2.0, 10e-9, 50e-9, n_pulses=3, start=5e-9)
    t = np.array([0, 5e-9, 14.9e-9, 15.1e-9, 55e-9, 65.1e-9, 105e-9, 200e-9])
    assert np.array_equal(env(t), [0, 2, 2, 0, 2, 0, 2, 0])
    assert env.peak == 2.0
    assert np.allclose(env.breakpoints, [5e-9, 15e-9, 55e-9, 65e-9, 105e-9, 115e-9])


def test_pulse_train_ramps_are_piecewise_constant():
    env = Envelope.pulse_train(1.0, 10e-9, 20e-9, rise_time=2e-9, ramp_segments=4)
    assert env(0.1e-9) == pytest.approx(0.125)
    assert env(5e-9) == 1.0
    assert env(9.9e-9) == pytest.approx(0.125)


def test_envelope_validation():
    with pytest.raises(InvalidParameterError):
        Envelope([0, 1], [-1.0])
    with pytest.raises(InvalidParameterError):
        Envelope([0, 0, 1], [1.0, 1.0])
    with pytest.raises(InvalidParameterError):
        Envelope.pulse_train(1.0, 10e-9, 5e-9)


def test_constant_and_from_samples():
    assert Envelope.constant(3.0)(1e9) == 3.0
    env = Envelope.from_samples(1.0, 0.5, [1, 0, 2])
    assert np.array_equal(env([0.9, 1.0, 1.6, 2.2, 2.5]), [0, 1, 0, 2, 0])


def test_driveset_accepts_numbers_and_callables():
    ds = DriveSet(1.0, lambda t: 2.0 * t, Envelope.constant(0.5))
    assert ds.at(3.0) == (1.0, 6.0, 0.5)
    assert not ds.piecewise
    with pytest.raises(InvalidParameterError):
        DriveSet(lambda t: -1.0).at(0.0)


# ---------------------------------------------------------------------------
# generator


def test_hamiltonian_structure():
    d = Detunings(1.0, 2.0, 4.0)
    h = build_hamiltonian(d, 10.0, 20.0, 30.0)
    assert np.allclose(np.diag(h).real, [0, 1, 3, -1])
    assert h[1, 0] == -5.0 and h[2, 1] == -10.0 and h[3, 2] == -15.0
    assert np.allclose(h, h.conj().T)
    assert np.count_nonzero(np.triu(h, 2)) == 0


def test_superoperator_matches_direct_rhs():
    rng = np.random.default_rng(1)
    cfg = LadderConfig(dephasing_gamma=(1e5, 2e5, 3e5))
    d = Detunings(rng.normal(size=5) * 1e7, rng.normal(size=5) * 1e7, 3e6)
    omegas = (OMEGA_P, OMEGA_C, OMEGA_RF)
    rho = random_density(rng, (5,))
    direct = master_rhs(rho, d, omegas, cfg)
    lv = liouvillian(d, omegas, cfg)
    via_super = (lv @ rho.reshape(5, 16, 1)).reshape(5, 4, 4)
    assert np.max(np.abs(direct - via_super)) < 1e-6 * np.max(np.abs(direct))


finite_rate = st.floats(-5e7, 5e7, allow_nan=False)
rabi = st.floats(0, 1e8, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(finite_rate, finite_rate, finite_rate, rabi, rabi, rabi, st.integers(0, 2**32 - 1))
def test_generator_preserves_trace_and_hermiticity(d1, d2, d3, op, oc, orf, seed):
    rho = random_density(np.random.default_rng(seed))
    drho = master_rhs(rho, Detunings(d1, d2, d3), (op, oc, orf), LadderConfig())
    scale = max(1.0, np.max(np.abs(drho)))
    assert abs(np.trace(drho)) < 1e-12 * scale
    assert np.max(np.abs(drho - drho.conj().T)) < 1e-12 * scale


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_real_coordinates_round_trip(seed):
    rho = random_density(np.random.default_rng(seed), (3,))
    back = from_real(to_real(rho))
    assert np.max(np.abs(back - rho)) < 1e-15
    assert np.array_equal(back, np.conj(np.swapaxes(back, -1, -2)))


def test_real_generator_is_similar_to_complex():
    cfg = LadderConfig()
    lv = liouvillian(Detunings(1e6, 2e6, 3e6), (OMEGA_P, OMEGA_C, OMEGA_RF), cfg)
    g = atomic.real_generator(lv)
    rho = random_density(np.random.default_rng(4))
    lhs = g @ to_real(rho)
    rhs = to_real((lv @ rho.reshape(16)).reshape(4, 4))
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-6 * np.abs(rhs).max())


def test_max_step_covers_all_rates():
    cfg = LadderConfig()
    d = Detunings(TWO_PI * 100e6)
    assert max_step(d, DriveSet(), cfg) == pytest.approx(1 / (50 * 100e6))
    ds = DriveSet(OMEGA_P, OMEGA_C, OMEGA_RF)
    assert max_step(Detunings(), ds, cfg) == pytest.approx(1 / (50 * 17.11e6))


# ---------------------------------------------------------------------------
# integration


def test_two_level_damped_rabi_oracle():
    cfg = LadderConfig(transit_rate=0.0)
    d, drives = Detunings(), DriveSet(OMEGA_P)
    t1 = 2e-6
    n = 2 * int(round(t1 / max_step(d, drives, cfg)))
    traj = integrate_rk4(ground_state(), d, drives, cfg, (0, t1), t1 / n)
    expected = torrey_excited(traj.times, OMEGA_P, cfg.gamma_21)
    assert np.max(np.abs(traj.populations[:, 1] - expected)) < 1e-6
    assert np.max(np.abs(traj.populations[:, 0] - (1 - expected))) < 1e-6
    assert np.max(np.abs(traj.populations[:, 2:])) == 0


def test_rk4_self_convergence_order():
    cfg = LadderConfig()
    t1 = 200e-9
    drives = DriveSet(lambda t: OMEGA_P * math.sin(math.pi * t / t1) ** 2, OMEGA_C, OMEGA_RF)
    d = Detunings(TWO_PI * 3e6, -TWO_PI * 2e6, TWO_PI * 1e6)
    n0 = math.ceil(t1 / max_step(d, drives, cfg, (0, t1)))
    finals = [integrate_rk4(ground_state(), d, drives, cfg, (0, t1), t1 / n,
                            sample_every=n).rho[-1] for n in (n0, 2 * n0, 4 * n0)]
    order = math.log2(np.abs(finals[0] - finals[1]).max() / np.abs(finals[1] - finals[2]).max())
    assert 3.7 <= order <= 4.1


def test_step_above_limit_is_rejected():
    cfg = LadderConfig()
    drives = DriveSet(OMEGA_P, OMEGA_C, OMEGA_RF)
    dt = 1.01 * max_step(Detunings(), drives, cfg)
    with pytest.raises(StepSizeError):
        integrate_rk4(ground_state(), Detunings(), drives, cfg, (0, 100 * dt), dt)
    with pytest.raises(StepSizeError):
        integrate_rk4(ground_state(), Detunings(), drives, cfg, (0, 1e-9), -1e-12)


def test_fast_propagation_matches_reference():
    cfg = LadderConfig()
    d = Detunings(np.linspace(-3e8, 3e8, 7), np.linspace(5e8, -5e8, 7), 0.0)
    probe = Envelope.pulse_train(OMEGA_P, 50e-9, 100e-9, 2, start=10e-9)
    drives = DriveSet(probe, OMEGA_C, Envelope.from_samples(0, 40e-9, [OMEGA_RF, 0, OMEGA_RF]))
    sample_dt = 0.5e-9
    fast = propagate(ground_state(), d, drives, cfg, (0, 200e-9), sample_dt)
    sub = fast.meta["steps_per_sample"]
    ref = integrate_rk4(ground_state(), d, drives, cfg, (0, 200e-9), sample_dt / sub,
                        sample_every=sub)
    assert np.allclose(fast.times, ref.times)
    assert np.max(np.abs(fast.rho - ref.rho)) < 1e-11

    w = np.arange(1.0, 8.0)
    avg = propagate(ground_state(), d, drives, cfg, (0, 200e-9), sample_dt, weights=w)
    expected = np.einsum("tvij,v->tij", ref.rho, w / w.sum())
    assert avg.rho.shape == (401, 4, 4)
    assert np.max(np.abs(avg.rho - expected)) < 1e-11


def test_propagate_requires_breakpoints_on_grid():
    cfg = LadderConfig()
    drives = DriveSet(Envelope.pulse_train(OMEGA_P, 10.25e-9, 40e-9))
    with pytest.raises(StepSizeError):
        propagate(ground_state(), Detunings(), drives, cfg, (0, 20e-9), 0.5e-9)
    with pytest.raises(InvalidParameterError):
        propagate(ground_state(), Detunings(), DriveSet(lambda t: 1.0), cfg, (0, 1e-9), 0.5e-9)


def test_invariant_violation_reports_first_bad_step():
    r = np.tile(to_real(ground_state()), (10, 1))
    r[7, 0] += 1e-6
    r[9, 0] += 1e-6
    with pytest.raises(NumericalInstabilityError) as err:
        atomic._check_chunk(r, first_sample=100, sub=3)
    assert err.value.step == 107 * 3


def test_positivity_violation_detected():
    rho = np.diag([0.5, 0.5, 0.0, 0.0]).astype(complex)
    rho[2, 3] = rho[3, 2] = 1e-3          # 2x2 block [[0, e], [e, 0]] has eigenvalue -e
    with pytest.raises(NumericalInstabilityError):
        atomic._check_state(rho, 5, check_positivity=True)
    atomic._check_state(rho, 5, check_positivity=False)
