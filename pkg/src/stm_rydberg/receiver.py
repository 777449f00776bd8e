"""STM pulse scheduling, OOK RF drive synthesis and the photodetector model."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import atomic, optics
from .atomic import DriveSet, Envelope, LadderConfig
from .constants import C_LIGHT, E_CHARGE, EPS0, K_B, RF_AREA
from .errors import InvalidParameterError, ScheduleError, StepSizeError

#: Benchmark (pulse width, repetition period) pairs in seconds.
BENCHMARK_PULSES = ((10e-9, 500e-9), (50e-9, 1000e-9), (100e-9, 1000e-9), (1000e-9, 2000e-9))

_RATIO_TOL = 1e-9


@dataclass(frozen=True)
class PulseTrain:
    width: float
    period: float
    amplitude: float = 1.0
    n_pulses: int = 1
    start_offset: float = 0.0

    def __post_init__(self):
        if not self.width > 0 or not self.width < self.period:
            raise InvalidParameterError(
                f"pulse width {self.width:g} s must be positive and below the period "
                f"{self.period:g} s")
        if self.n_pulses < 1:
            raise InvalidParameterError("n_pulses must be >= 1")

    @property
    def rep_rate(self) -> float:
        return 1.0 / self.period

    def starts(self) -> np.ndarray:
        return self.start_offset + self.period * np.arange(self.n_pulses)

    def envelope(self, rise_time: float = 0.0) -> Envelope:
        return Envelope.pulse_train(self.amplitude, self.width, self.period, self.n_pulses,
                                    self.start_offset, rise_time)


@dataclass(frozen=True)
class StmSchedule:
    n_beams: int
    trains: tuple[PulseTrain, ...]
    sampling_rate: float
    coverage_fraction: float

    @property
    def gap_free(self) -> bool:
        return abs(self.coverage_fraction - 1.0) < 1e-9

    def windows(self, n_periods: int = 1) -> np.ndarray:
        """(start, end, beam) rows of every pulse window, sorted by start."""
        rows = []
        for beam, train in enumerate(self.trains):
            for k in range(n_periods):
                t0 = train.start_offset + k * train.period
                rows.append((t0, t0 + train.width, beam))
        rows.sort()
        return np.asarray(rows)

    def active_beams(self, t) -> np.ndarray:
        """Number of beams whose probe pulse covers each time in ``t``."""
        t = np.asarray(t, dtype=float)
        count = np.zeros(t.shape, dtype=int)
        for train in self.trains:
            phase = np.mod(t - train.start_offset, train.period)
            count += (phase < train.width) & (t >= train.start_offset)
        return count


def make_stm_schedule(f_s: float, f_r: float, width: float,
                      amplitude: float = 1.0) -> StmSchedule:
    """N = f_s/f_r beams, beam k delayed by k*T, each repeating at f_r.

    Raises:
        ScheduleError: f_s/f_r is not an integer, or T > 1/f_s so that
            neighbouring beams would overlap.
    """
    if not (f_s > 0 and f_r > 0 and width > 0):
        raise ScheduleError("rates and pulse width must be positive")
    ratio = f_s / f_r
    n = round(ratio)
    if n < 1 or abs(ratio - n) > _RATIO_TOL * ratio:
        raise ScheduleError(f"f_s/f_r = {ratio:.6g} is not an integer")
    if width > (1.0 / f_s) * (1 + _RATIO_TOL):
        raise ScheduleError(f"pulse width {width:g} s exceeds 1/f_s = {1 / f_s:g} s; "
                            "staggered beams would overlap")
    period = 1.0 / f_r
    trains = tuple(PulseTrain(width, period, amplitude, 1, k * width) for k in range(n))
    return StmSchedule(n, trains, f_s, n * width * f_r)


# ---------------------------------------------------------------------------
# RF waveform


def efield_to_power(field_amplitude, area: float = RF_AREA):
    """Incident RF power (W, dBm) through ``area`` for a plane-wave amplitude."""
    e = np.asarray(field_amplitude, dtype=float)
    if np.any(e < 0):
        raise InvalidParameterError("field amplitude must be non-negative")
    p = 0.5 * C_LIGHT * EPS0 * e**2 * area
    with np.errstate(divide="ignore"):
        dbm = 10.0 * np.log10(p / 1e-3)
    return p, dbm


def power_to_efield(power, area: float = RF_AREA):
    p = np.asarray(power, dtype=float)
    if np.any(p < 0):
        raise InvalidParameterError("power must be non-negative")
    return np.sqrt(2.0 * p / (C_LIGHT * EPS0 * area))


def dbm_to_watts(dbm):
    return 1e-3 * 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def ook_rabi(bits, symbol_period: float, omega_on: float, start: float = 0.0) -> Envelope:
    """Piecewise-constant RF Rabi envelope: omega_on for '1' symbols, 0 for '0'."""
    bits = np.asarray([int(b) for b in bits])
    if bits.size == 0:
        raise InvalidParameterError("need at least one bit")
    if not set(np.unique(bits)) <= {0, 1}:
        raise InvalidParameterError("bits must be 0 or 1")
    return Envelope.from_samples(start, symbol_period, omega_on * bits)


@dataclass(frozen=True)
class OokWaveform:
    bits: tuple[int, ...]
    symbol_period: float
    rf_rabi_on: float
    rf_power_dbm: float

    @classmethod
    def from_power(cls, bits, symbol_period, power_dbm, cfg: LadderConfig,
                   area: float = RF_AREA) -> "OokWaveform":
        e = power_to_efield(dbm_to_watts(power_dbm), area)
        return cls(tuple(int(b) for b in bits), symbol_period,
                   float(cfg.rabi_from_field("43", e)), float(power_dbm))

    @classmethod
    def from_rabi(cls, bits, symbol_period, rabi, cfg: LadderConfig,
                  area: float = RF_AREA) -> "OokWaveform":
        _, dbm = efield_to_power(cfg.field_from_rabi("43", rabi), area)
        return cls(tuple(int(b) for b in bits), symbol_period, float(rabi), float(dbm))

    def envelope(self, start: float = 0.0) -> Envelope:
        return ook_rabi(self.bits, self.symbol_period, self.rf_rabi_on, start)


# ---------------------------------------------------------------------------
# detector


@dataclass(frozen=True)
class DetectorModel:
    """Linear photodetector with a single-pole response and additive noise.

    ``polarity=-1`` puts the probe on the inverting input of the balanced
    detector, so extra absorption reads as a positive voltage change.
    ``calibration`` scales the noiseless signal only.
    """

    responsivity: float = 0.5         # A/W
    gain: float = 1e4                 # V/A
    bandwidth: float = 400e6          # Hz
    dark_current: float = 1e-9        # A
    load_resistance: float = 1e4      # ohm
    temperature: float = 295.0        # K
    rng_seed: int = 0
    polarity: int = -1
    calibration: float = 1.0

    def __post_init__(self):
        for name in ("responsivity", "gain", "bandwidth", "load_resistance", "calibration"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"detector {name} must be positive")
        if self.dark_current < 0 or self.temperature < 0:
            raise InvalidParameterError("dark current and temperature must be >= 0")
        if self.polarity not in (1, -1):
            raise InvalidParameterError("polarity must be +1 or -1")

    def current_psd(self, mean_current) -> np.ndarray:
        """One-sided current noise PSD (A^2/Hz): shot + dark + Johnson."""
        i = np.asarray(mean_current, dtype=float)
        return 2.0 * E_CHARGE * (np.abs(i) + self.dark_current) + \
            4.0 * K_B * self.temperature / self.load_resistance

    def filter_pole(self, dt: float) -> float:
        return math.exp(-2.0 * math.pi * self.bandwidth * dt)

    def lowpass(self, x, dt: float, zi=None) -> np.ndarray:
        a = self.filter_pole(dt)
        y, _ = lfilter([1.0 - a], [1.0, -a], x, axis=-1,
                       zi=np.zeros(np.shape(x)[:-1] + (1,)) if zi is None else zi)
        return y

    def output_noise_variance(self, mean_current: float) -> float:
        """Analytic voltage noise variance: PSD x gain^2 x (pi/2) f_det."""
        return float(self.current_psd(mean_current) * self.gain**2 * math.pi / 2 *
                     self.bandwidth)

    def rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.rng_seed, *key]))


def noise_sample(det: DetectorModel, mean_current, dt: float, n: int,
                 rng: np.random.Generator | None = None, size: int | None = None) -> np.ndarray:
    """Band-limited Gaussian detector noise in volts.

    White samples of variance PSD/(2 dt), with the PSD evaluated from the
    (possibly time-varying) mean photocurrent, pass through the detector's
    single-pole filter. The filter starts in its stationary state.
    ``size`` draws that many independent realizations (leading axis).
    """
    if not dt > 0:
        raise StepSizeError("dt must be positive")
    rng = det.rng() if rng is None else rng
    current = np.broadcast_to(np.asarray(mean_current, dtype=float), (n,))
    sigma = det.gain * np.sqrt(det.current_psd(current) / (2.0 * dt))
    shape = (n,) if size is None else (size, n)
    white = rng.standard_normal(shape) * sigma
    a = det.filter_pole(dt)
    stationary = sigma[0] * math.sqrt((1.0 - a) / (1.0 + a))
    zi = (a * stationary * rng.standard_normal(shape[:-1]))[..., None]
    return det.lowpass(white, dt, zi)


def detect(p_out, det: DetectorModel, dt: float, *, noise: bool = True,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Voltage trace from optical power: filtered linear readout plus noise."""
    p_out = np.asarray(p_out, dtype=float)
    if np.any(p_out < 0):
        raise InvalidParameterError("optical power must be non-negative")
    current = det.responsivity * p_out
    v = det.polarity * det.calibration * det.gain * det.lowpass(current, dt)
    if noise:
        v = v + noise_sample(det, current, dt, len(current), rng)
    return v


# ---------------------------------------------------------------------------
# pulse response

DEFAULT_SAMPLE_DT = 0.1e-9


def pulse_sample_dt(width: float, period: float, target: float = DEFAULT_SAMPLE_DT) -> float:
    """Largest width/m (integer m) not above ``target``; period must fit the grid."""
    dt = width / math.ceil(width / target * (1 - 1e-12))
    ratio = period / dt
    if abs(ratio - round(ratio)) > 1e-6:
        raise ScheduleError(f"period {period:g} s is not on the {dt:g} s sample grid")
    return dt


@dataclass
class PulseResponse:
    """Detector traces for one pulse train with the RF on and off.

    Arrays are (n_pulses, n_samples); ``times`` is relative to each pulse's
    rising edge.
    """

    times: np.ndarray
    v_on: np.ndarray
    v_off: np.ndarray
    p_on: np.ndarray
    p_off: np.ndarray
    dt: float
    width: float
    meta: dict = field(default_factory=dict)

    @property
    def in_pulse(self) -> np.ndarray:
        return (self.times >= 0) & (self.times < self.width)


def transmitted_power(cfg: LadderConfig, cell: optics.VaporCellParams,
                      beams: optics.BeamParams, train: PulseTrain, rf_envelope,
                      grid: optics.VelocityGrid, t_span, sample_dt: float,
                      dt_factor: float = 1.0):
    """Noiseless P_out(t) for a probe pulse train through the Doppler ensemble."""
    omega_p = beams.omega_p(cfg)
    probe = Envelope.pulse_train(omega_p, train.width, train.period, train.n_pulses,
                                 train.start_offset)
    drives = DriveSet(probe, beams.omega_c(cfg), rf_envelope)
    d = optics.doppler_detunings(beams.detunings, grid.velocities, cfg.probe_wavelength,
                                 cfg.coupling_wavelength)
    dt = None
    if dt_factor != 1.0:
        dt_max = atomic.max_step(d, drives, cfg)
        dt = sample_dt / math.ceil(sample_dt / (dt_factor * dt_max))
    traj = atomic.propagate(atomic.ground_state(), d, drives, cfg, t_span, sample_dt, dt=dt,
                            weights=grid.weights)
    # the sample at t reports the state reached at t and the probe power on [t, t + dt)
    on = probe(traj.times + 0.5 * sample_dt) > 0
    p_in = np.where(on, beams.probe_power, 0.0)
    rho21 = traj.rho21  # already Doppler averaged
    e_p = np.where(on, beams.probe_field, 0.0)
    chi = optics.susceptibility(rho21, e_p, cfg, cell, probe_off="nan")
    tr = optics.transmit(p_in, chi, cfg.probe_wavelength, cell.length)
    return traj.times, p_in, tr.p_out, tr.warnings


def simulate_pulse_response(cfg: LadderConfig, cell: optics.VaporCellParams,
                            beams: optics.BeamParams, train: PulseTrain, rf_rabi,
                            det: DetectorModel, *, grid: optics.VelocityGrid | None = None,
                            n_classes: int = 401, sample_dt: float | None = None,
                            margin: float | None = None, noise: bool = True,
                            rng_key: tuple[int, ...] = (), dt_factor: float = 1.0
                            ) -> PulseResponse:
    """Detected RF-on and RF-off traces for every pulse of ``train``.

    Args:
        rf_rabi: RF Rabi frequency while on (rad/s), or an :class:`Envelope`
            such as an OOK waveform. The RF-off run uses zero drive.
        margin: time kept before and after each pulse in the per-pulse
            traces; defaults to T/2 so trace length scales with T.
        rng_key: extra integers mixed into the detector seed.
    """
    if train.period < 5.0 / cfg.gamma_21:
        warnings.warn("repetition period shorter than 5/Gamma_21; atoms may not relax "
                      "between pulses", stacklevel=2)
    grid = grid or optics.build_velocity_grid(cell.temperature, cfg.atom_mass, n_classes)
    sample_dt = sample_dt or pulse_sample_dt(train.width, train.period)
    margin = 0.5 * train.width if margin is None else margin
    n_margin = int(round(margin / sample_dt))
    n_width = int(round(train.width / sample_dt))
    t0 = train.start_offset - n_margin * sample_dt
    t1 = train.starts()[-1] + (n_width + n_margin) * sample_dt
    rf_on = rf_rabi if isinstance(rf_rabi, Envelope) else Envelope.constant(float(rf_rabi))

    results = {}
    notes = []
    for label, env in (("on", rf_on), ("off", Envelope.constant(0.0))):
        times, _, p_out, w = transmitted_power(cfg, cell, beams, train, env, grid, (t0, t1),
                                               sample_dt, dt_factor)
        notes += w
        rng = det.rng(*rng_key, 0 if label == "on" else 1)
        v = detect(p_out, det, sample_dt, noise=noise, rng=rng)
        results[label] = (p_out, v)

    starts = np.round((train.starts() - t0) / sample_dt).astype(int)
    idx = starts[:, None] + np.arange(-n_margin, n_width + n_margin)[None, :]
    rel = np.arange(-n_margin, n_width + n_margin) * sample_dt
    return PulseResponse(
        times=rel,
        v_on=results["on"][1][idx], v_off=results["off"][1][idx],
        p_on=results["on"][0][idx], p_off=results["off"][0][idx],
        dt=sample_dt, width=train.width,
        meta={"n_classes": len(grid), "calibration": det.calibration, "warnings": notes},
    )
