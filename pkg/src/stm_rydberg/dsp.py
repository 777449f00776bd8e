"""Matched filtering, signal/noise metrics, SNR and the OOK bit-error ratio."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import DivisionGuardError, InvalidParameterError, ShapeError

BER_FLOOR = 1e-30
MIN_REPETITIONS = 30


def _kernel_length(width: float, dt: float) -> int:
    k = int(round(width / dt))
    if k < 1 or abs(k * dt - width) > 1e-6 * width:
        raise ShapeError(f"pulse width {width:g} s is not a whole number of {dt:g} s samples")
    return k


def matched_filter(s, width: float, dt: float) -> np.ndarray:
    """Correlate with the unit-area rectangular kernel of duration ``width``.

    Only fully overlapping lags are returned, so a series of n samples
    gives n - K + 1 outputs with K = width/dt. Works along the last axis.
    """
    s = np.asarray(s, dtype=float)
    k = _kernel_length(width, dt)
    n = s.shape[-1]
    if n < k:
        raise ShapeError(f"series of {n} samples is shorter than the {k}-sample kernel")
    c = np.cumsum(s, axis=-1)
    c = np.concatenate([np.zeros(s.shape[:-1] + (1,)), c], axis=-1)
    return (c[..., k:] - c[..., :-k]) / k


def signal_metric(s_on, s_off) -> float:
    """S_j: largest value of the filtered RF-on minus RF-off trace."""
    s_on = np.asarray(s_on)
    s_off = np.asarray(s_off)
    if s_on.shape != s_off.shape:
        raise ShapeError(f"RF-on/off grids differ: {s_on.shape} vs {s_off.shape}")
    return float(np.max(s_on - s_off))


def noise_metric(filtered_noise) -> np.ndarray:
    """N_j for each realization: max over lags of a filtered noise trace.

    ``filtered_noise`` is (n_realizations, n_lags), one row per j.
    """
    x = np.atleast_2d(np.asarray(filtered_noise, dtype=float))
    return x.max(axis=-1)


def snr(signal_values, noise_values, min_repetitions: int = MIN_REPETITIONS) -> float:
    """<S_j>^2 / <N_j^2> over repeated measurements."""
    s = np.atleast_1d(np.asarray(signal_values, dtype=float))
    n = np.atleast_1d(np.asarray(noise_values, dtype=float))
    if len(n) < min_repetitions:
        raise InvalidParameterError(
            f"need at least {min_repetitions} noise repetitions, got {len(n)}")
    noise_power = float(np.mean(n**2))
    if noise_power == 0:
        raise DivisionGuardError("noise power is zero")
    return float(np.mean(s)) ** 2 / noise_power


def ber_from_snr(snr_value, floor: float = BER_FLOOR):
    """BER = 1/2 [1 - erf(sqrt(SNR) / (2 sqrt 2))], floored at ``floor``.

    Evaluated through erfc so that small error ratios keep full relative
    precision.
    """
    x = np.asarray(snr_value, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise InvalidParameterError("SNR must be non-negative")
    ber = np.maximum(0.5 * erfc(np.sqrt(x) / (2.0 * np.sqrt(2.0))), floor)
    return float(ber) if ber.ndim == 0 else ber


@dataclass
class DetectionRecord:
    pulse_width: float
    s_on: np.ndarray
    s_off: np.ndarray
    signal: float               # S_j (identical across j for noiseless signal runs)
    noise: np.ndarray           # N_j per repetition
    snr: float
    ber: float
    rf_power_dbm: float = float("nan")

    @property
    def n_repetitions(self) -> int:
        return len(self.noise)


def detection_record(s_on, s_off, noise_traces, width: float, dt: float,
                     rf_power_dbm: float = float("nan"),
                     min_repetitions: int = MIN_REPETITIONS) -> DetectionRecord:
    """Filter signal and noise traces and derive S_j, N_j, SNR and BER.

    ``noise_traces`` holds one unfiltered noise-only trace per repetition
    (already differenced if the differenced-pair convention is used).
    """
    f_on = matched_filter(s_on, width, dt)
    f_off = matched_filter(s_off, width, dt)
    sig = signal_metric(f_on, f_off)
    n_j = noise_metric(matched_filter(noise_traces, width, dt))
    value = snr(sig, n_j, min_repetitions)
    return DetectionRecord(width, f_on, f_off, sig, n_j, value, ber_from_snr(value),
                           rf_power_dbm)
