import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stm_rydberg import optics, receiver
from stm_rydberg.atomic import Envelope, LadderConfig
from stm_rydberg.constants import C_LIGHT, EPS0, TWO_PI
from stm_rydberg.errors import InvalidParameterError, ScheduleError
from stm_rydberg.receiver import DetectorModel, PulseTrain, make_stm_schedule

CFG = LadderConfig()


# ---------------------------------------------------------------------------
# pulse trains and schedules


def test_benchmark_pairs_are_valid_trains():
    for width, period in receiver.BENCHMARK_PULSES:
        train = PulseTrain(width, period)
        assert train.rep_rate == pytest.approx(1 / period)
    with pytest.raises(InvalidParameterError):
        PulseTrain(1000e-9, 500e-9)
    with pytest.raises(InvalidParameterError):
        PulseTrain(10e-9, 10e-9)


def test_stm_schedule_fifty_beams_gap_free():
    sched = make_stm_schedule(100e6, 2e6, 10e-9)
    assert sched.n_beams == 50
    assert sched.gap_free
    starts = np.array([tr.start_offset for tr in sched.trains])
    assert np.allclose(starts, np.arange(50) * 10e-9)
    t = np.linspace(0, 4 * 500e-9, 20001, endpoint=False) + 0.05e-9
    assert np.all(sched.active_beams(t[t >= 490e-9]) == 1)
    w = sched.windows(2)
    assert np.allclose(w[1:, 0], w[:-1, 1])


def test_single_beam_duty_cycle():
    sched = make_stm_schedule(1e6, 1e6, 100e-9)
    assert sched.n_beams == 1
    assert sched.coverage_fraction == pytest.approx(0.1)
    assert not sched.gap_free


def test_schedule_errors():
    with pytest.raises(ScheduleError):
        make_stm_schedule(100e6, 3e6, 10e-9)
    with pytest.raises(ScheduleError):
        make_stm_schedule(100e6, 2e6, 20e-9)
    with pytest.raises(ScheduleError):
        make_stm_schedule(-1.0, 2e6, 1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 100), st.floats(0.05, 1.0))
def test_schedule_coverage_fraction(n_beams, f_r_khz, duty):
    f_r = f_r_khz * 1e3
    f_s = n_beams * f_r
    width = duty / f_s
    sched = make_stm_schedule(f_s, f_r, width)
    assert sched.n_beams == n_beams
    assert sched.coverage_fraction == pytest.approx(n_beams * width * f_r, rel=1e-12)
    # sampled coverage over one period agrees with N T f_r
    # random times avoid ties at the shared window edges
    rng = np.random.default_rng(n_beams * 1000 + f_r_khz)
    t = rng.uniform(0, 1 / f_r, 20000) + (n_beams - 1) * width
    active = sched.active_beams(t)
    assert active.max() <= 1
    assert active.mean() == pytest.approx(sched.coverage_fraction, abs=0.015)


# ---------------------------------------------------------------------------
# RF waveform and conversions


def test_ook_envelopes():
    env = receiver.ook_rabi([1, 0, 1, 0], 10e-9, 5.0)
    t = (np.arange(4) + 0.5) * 10e-9
    assert np.array_equal(env(t), [5, 0, 5, 0])
    assert np.all(receiver.ook_rabi([0, 0, 0], 10e-9, 5.0)(t) == 0)
    assert receiver.ook_rabi([1], 10e-9, 5.0)(5e-9) == 5.0
    with pytest.raises(InvalidParameterError):
        receiver.ook_rabi([], 1e-9, 1.0)
    with pytest.raises(InvalidParameterError):
        receiver.ook_rabi([2], 1e-9, 1.0)


def test_efield_power_conversion():
    p, dbm = receiver.efield_to_power(0.6)
    assert p == pytest.approx(0.5 * C_LIGHT * EPS0 * 0.36 * 3.075e-5, rel=1e-12)
    assert p == pytest.approx(1.47e-8, rel=5e-3)
    assert dbm == pytest.approx(-48.3, abs=0.05)
    assert receiver.efield_to_power(0.0)[0] == 0.0
    assert receiver.efield_to_power(1.2)[0] == pytest.approx(4 * p, rel=1e-14)
    with pytest.raises(InvalidParameterError):
        receiver.efield_to_power(-1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-80, 10))
def test_power_field_rabi_round_trip(dbm):
    wf = receiver.OokWaveform.from_power([1, 0], 1e-8, dbm, CFG)
    back = receiver.OokWaveform.from_rabi([1, 0], 1e-8, wf.rf_rabi_on, CFG)
    assert back.rf_power_dbm == pytest.approx(dbm, rel=1e-12, abs=1e-12)
    e = receiver.power_to_efield(receiver.dbm_to_watts(dbm))
    assert receiver.efield_to_power(e)[1] == pytest.approx(dbm, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# detector


def test_detector_validation():
    with pytest.raises(InvalidParameterError):
        DetectorModel(bandwidth=0)
    with pytest.raises(InvalidParameterError):
        DetectorModel(polarity=2)


def test_noiseless_zero_and_linearity():
    det = DetectorModel()
    assert np.all(receiver.detect(np.zeros(100), det, 1e-10, noise=False) == 0)
    p = np.abs(np.sin(np.linspace(0, 10, 500))) * 1e-6
    v1 = receiver.detect(p, det, 1e-10, noise=False)
    v3 = receiver.detect(3 * p, det, 1e-10, noise=False)
    assert np.allclose(v3, 3 * v1, rtol=1e-13, atol=0)
    with pytest.raises(InvalidParameterError):
        receiver.detect(-p, det, 1e-10)


def test_step_response_rise_time():
    det = DetectorModel(polarity=1)
    dt = 1e-12
    v = receiver.detect(np.ones(20000), det, dt, noise=False)
    v = v / v[-1]
    t10 = np.argmax(v >= 0.1) * dt
    t90 = np.argmax(v >= 0.9) * dt
    assert t90 - t10 == pytest.approx(0.35 / det.bandwidth, rel=0.05)


def test_noise_variance_matches_analytic_psd():
    det = DetectorModel()
    current = 2e-6
    x = receiver.noise_sample(det, current, 0.1e-9, 1_000_000, det.rng(3))
    assert x.var() == pytest.approx(det.output_noise_variance(current), rel=0.05)
    assert abs(x.mean()) < 5 * math.sqrt(x.var() / 1e6 * 40)


def test_noise_autocorrelation_time():
    det = DetectorModel()
    dt = 0.05e-9
    x = receiver.noise_sample(det, 1e-6, dt, 400_000, det.rng(4))
    x = x - x.mean()
    lags = np.arange(1, 11)
    acf = np.array([np.dot(x[: len(x) - k], x[k:]) for k in lags]) / np.dot(x, x)
    tau = -1.0 / np.polyfit(lags * dt, np.log(acf), 1)[0]
    assert tau == pytest.approx(1 / (TWO_PI * det.bandwidth), rel=0.10)


def test_zero_noise_parameters_give_zero_noise():
    det = DetectorModel(dark_current=0.0, temperature=0.0)
    assert np.all(receiver.noise_sample(det, 0.0, 1e-10, 1000) == 0)


def test_shot_noise_scales_with_current():
    det = DetectorModel(dark_current=0.0, temperature=0.0)
    assert det.current_psd(2e-6) == pytest.approx(2 * det.current_psd(1e-6))


def test_noise_determinism_and_independence():
    det = DetectorModel(rng_seed=11)
    a = receiver.noise_sample(det, 1e-6, 1e-10, 50_000, det.rng(1))
    b = receiver.noise_sample(det, 1e-6, 1e-10, 50_000, det.rng(1))
    c = receiver.noise_sample(det, 1e-6, 1e-10, 50_000, det.rng(2))
    assert np.array_equal(a, b)
    # filtered noise is correlated over ~3 samples; compare decimated series
    a_d, c_d = a[::20], c[::20]
    r = np.corrcoef(a_d, c_d)[0, 1]
    assert abs(r) < 3 / math.sqrt(len(a_d))


# ---------------------------------------------------------------------------
# pulse simulation


def test_pulse_sample_dt():
    assert receiver.pulse_sample_dt(10e-9, 500e-9) == pytest.approx(0.1e-9)
    assert receiver.pulse_sample_dt(0.25e-9, 1e-9) == pytest.approx(0.0833333e-9, rel=1e-5)
    with pytest.raises(ScheduleError):
        receiver.pulse_sample_dt(10e-9, 10.05e-9)


@pytest.fixture(scope="module")
def small_grid():
    return optics.build_velocity_grid(295, CFG.atom_mass, 41)


def test_rf_off_equals_all_zero_bits(small_grid):
    cell, beams = optics.VaporCellParams(), optics.BeamParams()
    train = PulseTrain(20e-9, 100e-9)
    span = (-10e-9, 30e-9)
    _, _, off, _ = receiver.transmitted_power(CFG, cell, beams, train, Envelope.constant(0.0),
                                              small_grid, span, 0.1e-9)
    _, _, zero, _ = receiver.transmitted_power(CFG, cell, beams, train,
                                               receiver.ook_rabi([0], 20e-9, 1e8),
                                               small_grid, span, 0.1e-9)
    assert np.array_equal(off, zero)


def test_pulse_response_shapes_and_sign(small_grid):
    cell, beams = optics.VaporCellParams(), optics.BeamParams()
    det = DetectorModel()
    train = PulseTrain(100e-9, 2000e-9, n_pulses=2)
    pr = receiver.simulate_pulse_response(CFG, cell, beams, train, TWO_PI * 17.11e6, det,
                                          grid=small_grid, noise=False)
    n = int(round(200e-9 / 0.1e-9))
    assert pr.v_on.shape == (2, n) and pr.times.shape == (n,)
    assert np.all(pr.p_on[:, ~pr.in_pulse] == 0)
    # RF destroys EIT, so the inverting readout rises with the RF on
    assert np.max(pr.v_on - pr.v_off) > 0
    # 2 us is enough for the Rydberg levels to empty, so both pulses look alike
    assert np.allclose(pr.v_on[0], pr.v_on[1], rtol=0, atol=1e-3 * np.abs(pr.v_on).max())


def test_short_period_warns(small_grid):
    cell, beams = optics.VaporCellParams(), optics.BeamParams()
    with pytest.warns(UserWarning, match="relax"):
        receiver.simulate_pulse_response(CFG, cell, beams, PulseTrain(10e-9, 50e-9), 0.0,
                                         DetectorModel(), grid=small_grid, noise=False)
