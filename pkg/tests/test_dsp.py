import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from stm_rydberg import dsp
from stm_rydberg.errors import DivisionGuardError, InvalidParameterError, ShapeError


def erf_series(x: float) -> float:
    """Maclaurin series of erf; converges for all x, accurate to ~1e-14 here."""
    term, n = x, 0
    terms = []
    while abs(term) > 1e-30 or n < 5:
        terms.append(term / (2 * n + 1))
        n += 1
        term *= -x * x / n
    return 2.0 / math.sqrt(math.pi) * math.fsum(terms)


def ber_oracle(snr: float) -> float:
    return 0.5 * (1.0 - erf_series(math.sqrt(snr) / (2 * math.sqrt(2))))


# ---------------------------------------------------------------------------
# matched filter


def test_constant_input_passes_unchanged():
    out = dsp.matched_filter(np.full(100, 2.5), 10e-9, 1e-9)
    assert out.shape == (91,)
    assert np.allclose(out, 2.5, rtol=1e-15)


def test_rectangle_gives_triangle():
    x = np.zeros(60)
    x[20:30] = 3.0
    out = dsp.matched_filter(x, 10e-9, 1e-9)
    assert out.max() == pytest.approx(3.0)
    assert np.argmax(out) == 20
    assert np.allclose(out[11:30], 3.0 * (10 - np.abs(np.arange(11, 30) - 20)) / 10)


def test_white_noise_variance_reduction():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 2.0, 400_000)
    out = dsp.matched_filter(x, 25e-9, 1e-9)[::25]
    assert out.var() == pytest.approx(4.0 / 25, rel=0.03)


def test_filter_errors_and_linearity():
    with pytest.raises(ShapeError):
        dsp.matched_filter(np.ones(5), 10e-9, 1e-9)
    with pytest.raises(ShapeError):
        dsp.matched_filter(np.ones(50), 10.5e-9, 1e-9)
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 80))
    lhs = dsp.matched_filter(2 * a + 3 * b, 8e-9, 1e-9)
    rhs = 2 * dsp.matched_filter(a, 8e-9, 1e-9) + 3 * dsp.matched_filter(b, 8e-9, 1e-9)
    assert np.allclose(lhs, rhs)
    # shift covariance
    assert np.allclose(dsp.matched_filter(a[5:], 8e-9, 1e-9), dsp.matched_filter(a, 8e-9, 1e-9)[5:])


# ---------------------------------------------------------------------------
# metrics


def test_signal_metric():
    s = np.linspace(0, 1, 20)
    assert dsp.signal_metric(s, s) == 0.0
    assert dsp.signal_metric(s + 0.3, s) == pytest.approx(0.3)
    with pytest.raises(ShapeError):
        dsp.signal_metric(s, s[:-1])


def test_noise_metric_zero_and_rows():
    assert np.all(dsp.noise_metric(np.zeros((4, 10))) == 0)
    assert np.array_equal(dsp.noise_metric([[1, 5, 2], [-1, -3, -2]]), [5, -1])


def test_noise_power_scales_inverse_with_width():
    # window of two pulse widths; the max-statistic factor then drifts only
    # slowly with the sample count, so log <N^2> vs log T has slope near -1
    rng = np.random.default_rng(2)
    dt = 1e-9
    widths = np.array([10, 100, 1000])
    power = []
    for k in widths:
        noise = rng.normal(size=(1000, 2 * k))
        power.append(np.mean(dsp.noise_metric(dsp.matched_filter(noise, k * dt, dt)) ** 2))
    slope = np.polyfit(np.log(widths), np.log(power), 1)[0]
    assert -1.1 < slope < -0.9


def test_noise_metric_distribution_does_not_depend_on_seed():
    def n_j(seed):
        noise = np.random.default_rng(seed).normal(size=(1000, 200))
        return dsp.noise_metric(dsp.matched_filter(noise, 100e-9, 1e-9))

    assert ks_2samp(n_j(10), n_j(11)).pvalue > 0.01


def test_snr_definition():
    assert dsp.snr(np.full(40, 2.0), np.ones(40)) == 4.0
    rng = np.random.default_rng(3)
    s, n = rng.normal(1, 0.1, 50), rng.normal(0, 1, 50)
    assert dsp.snr(7 * s, 7 * n) == pytest.approx(dsp.snr(s, n), rel=1e-12)
    with pytest.raises(InvalidParameterError):
        dsp.snr([1.0], np.ones(10))
    with pytest.raises(DivisionGuardError):
        dsp.snr([1.0], np.zeros(40))


def test_snr_estimator_spread_shrinks_with_repetitions():
    rng = np.random.default_rng(4)
    pool = dsp.noise_metric(dsp.matched_filter(rng.normal(size=(20000, 40)), 20e-9, 1e-9))

    def spread(n):
        values = [dsp.snr(1.0, rng.choice(pool, n)) for _ in range(400)]
        return np.std(values)

    ratio = spread(50) / spread(200)
    assert ratio == pytest.approx(2.0, rel=0.3)


# ---------------------------------------------------------------------------
# BER


def test_ber_anchor_values():
    assert dsp.ber_from_snr(0) == 0.5
    assert dsp.ber_from_snr(1) == pytest.approx(0.30854, abs=1e-4)
    assert dsp.ber_from_snr(36) == pytest.approx(1.350e-3, abs=2e-5)


@pytest.mark.parametrize("snr", [0.0, 0.01, 0.5, 1.0, 4.0, 10.0, 36.0, 100.0])
def test_ber_matches_series_oracle(snr):
    assert dsp.ber_from_snr(snr) == pytest.approx(ber_oracle(snr), abs=1e-12)


def test_ber_floor_and_errors():
    assert dsp.ber_from_snr(1e6) == dsp.BER_FLOOR
    assert dsp.ber_from_snr(1e6, floor=0.0) == 0.0
    with pytest.raises(InvalidParameterError):
        dsp.ber_from_snr(-1.0)
    with pytest.raises(InvalidParameterError):
        dsp.ber_from_snr(float("nan"))
    assert np.allclose(dsp.ber_from_snr(np.array([0.0, 1.0])), [0.5, dsp.ber_from_snr(1.0)])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e3), st.floats(1e-6, 1e3))
def test_ber_strictly_decreasing(snr, step):
    lo, hi = dsp.ber_from_snr(snr), dsp.ber_from_snr(snr + step)
    assert hi <= lo
    if lo > 1e-29:
        assert hi < lo
    assert 0 < hi <= 0.5


def test_detection_record_consistency():
    dt, width = 1e-9, 10e-9
    t = np.arange(40)
    on = np.where((t >= 10) & (t < 20), 1.0, 0.0)
    rng = np.random.default_rng(5)
    noise = rng.normal(0, 0.2, (50, 40))
    rec = dsp.detection_record(on, np.zeros(40), noise, width, dt, rf_power_dbm=-30.0)
    assert rec.signal == pytest.approx(1.0)
    assert rec.n_repetitions == 50
    assert rec.snr >= 0 and 0 < rec.ber <= 0.5
    assert rec.ber == dsp.ber_from_snr(rec.snr)
    assert rec.snr == pytest.approx(1.0 / np.mean(rec.noise**2))
