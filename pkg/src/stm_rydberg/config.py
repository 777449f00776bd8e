"""Experiment configuration: TOML schema, defaults, validation and hashing.

Rates and detunings are given in Hz (cycles per second) in the file and
converted to rad/s when the physics objects are built. An empty file
yields the benchmark setup.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import atomic, optics, receiver
from .constants import AMU, COUPLING_WAVELENGTH, PROBE_WAVELENGTH, RB85_ABUNDANCE, RF_AREA, \
    TWO_PI
from .errors import ConfigError, StmError

SCHEMA_VERSION = 1

NOISE_MODES = ("differenced", "single")
RF_CONVERSIONS = ("dipole", "calibrated")


@dataclass
class AtomicSection:
    dipole_d21: float = 1.93
    dipole_d32: float = 0.0102
    dipole_d43: float = 1372.2
    gamma_21_hz: float = 6.066e6
    gamma_32_hz: float = 500e3
    gamma_43_hz: float = 500e3
    dephasing_hz: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    transit_rate_hz: float | None = None     # None: derived from the beam geometry
    atom_mass_u: float = 84.911789732
    beam_waist_m: float = 190e-6
    probe_wavelength_m: float = PROBE_WAVELENGTH
    coupling_wavelength_m: float = COUPLING_WAVELENGTH


@dataclass
class CellSection:
    length_m: float = 0.075
    temperature_k: float = 295.0
    isotope_fraction: float = RB85_ABUNDANCE
    density_m3: float | None = None          # None: saturated vapor density


@dataclass
class BeamsSection:
    probe_power_w: float = 4.7e-6
    probe_waist_m: float = 190e-6
    coupling_power_w: float = 0.6
    coupling_waist_m: float = 200e-6
    delta1_hz: float = 0.0
    delta2_hz: float = 0.0
    delta3_hz: float = 0.0


@dataclass
class DetectorSection:
    responsivity_a_per_w: float = 0.5
    gain_v_per_a: float = 1e4
    bandwidth_hz: float = 400e6
    dark_current_a: float = 1e-9
    load_resistance_ohm: float = 1e4
    temperature_k: float = 295.0
    polarity: int = -1
    calibration: float = 1.0


@dataclass
class ScheduleSection:
    # (pulse width, repetition period) pairs for pulse-response, in ns
    pulse_pairs_ns: list = field(
        default_factory=lambda: [[10.0, 500.0], [50.0, 1000.0], [100.0, 1000.0],
                                 [1000.0, 2000.0]])
    # per-beam repetition rate f_r used by the rate sweeps (f_s = data rate)
    repetition_rate_hz: float = 0.5e6


@dataclass
class RfSection:
    powers_dbm: list = field(default_factory=lambda: [-55.0 + 2.5 * k for k in range(13)])
    rates_hz: list = field(default_factory=lambda: [1e6, 2e6, 5e6, 10e6, 20e6, 50e6, 100e6])
    benchmark_rabi_hz: float = 17.11e6
    area_m2: float = RF_AREA
    conversion: str = "dipole"
    calibration_field_v_per_m: float = 0.6
    bits: list = field(default_factory=lambda: [1])


@dataclass
class NumericsSection:
    dt_factor: float = 1.0
    n_velocity_classes: int = 401
    spectrum_velocity_classes: int = 1601
    spectrum_span_hz: float = 80e6
    spectrum_points: int = 161
    repetitions: int = 200
    min_repetitions: int = 30
    seed: int = 0
    sample_dt_s: float = 0.1e-9
    threads: int = 1
    noise_mode: str = "differenced"


@dataclass
class OutputSection:
    directory: str = "out"
    format: str = "csv"


SECTIONS = {
    "atomic": AtomicSection,
    "cell": CellSection,
    "beams": BeamsSection,
    "detector": DetectorSection,
    "schedule": ScheduleSection,
    "rf": RfSection,
    "numerics": NumericsSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    atomic: AtomicSection = field(default_factory=AtomicSection)
    cell: CellSection = field(default_factory=CellSection)
    beams: BeamsSection = field(default_factory=BeamsSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    rf: RfSection = field(default_factory=RfSection)
    numerics: NumericsSection = field(default_factory=NumericsSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ---- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        """Nested plain dict; keys with value None are omitted (TOML has no null)."""
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: v for k, v in sec.items() if v is not None}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical JSON form.

        The output directory and thread count do not change results and
        are left out.
        """
        d = self.to_dict()
        d.pop("output")
        d["numerics"].pop("threads")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, *, seed: int | None = None, threads: int | None = None,
                       directory: str | None = None) -> "ExperimentConfig":
        new = config_from_dict(self.to_dict())
        if seed is not None:
            new.numerics.seed = int(seed)
        if threads is not None:
            new.numerics.threads = int(threads)
        if directory is not None:
            new.output.directory = str(directory)
        validate_config(new)
        return new

    # ---- physics objects -----------------------------------------------

    def ladder(self) -> atomic.LadderConfig:
        a = self.atomic
        transit = None if a.transit_rate_hz is None else TWO_PI * a.transit_rate_hz
        return atomic.LadderConfig(
            dipole_d21=a.dipole_d21, dipole_d32=a.dipole_d32, dipole_d43=a.dipole_d43,
            gamma_21=TWO_PI * a.gamma_21_hz, gamma_32=TWO_PI * a.gamma_32_hz,
            gamma_43=TWO_PI * a.gamma_43_hz,
            dephasing_gamma=tuple(TWO_PI * g for g in a.dephasing_hz),
            transit_rate=transit, temperature=self.cell.temperature_k,
            atom_mass=a.atom_mass_u * AMU, beam_waist=a.beam_waist_m,
            cell_length=self.cell.length_m, probe_wavelength=a.probe_wavelength_m,
            coupling_wavelength=a.coupling_wavelength_m)

    def cell_params(self) -> optics.VaporCellParams:
        c = self.cell
        return optics.VaporCellParams(c.length_m, c.temperature_k, c.isotope_fraction,
                                      c.density_m3)

    def beam_params(self) -> optics.BeamParams:
        b = self.beams
        return optics.BeamParams(b.probe_power_w, b.probe_waist_m, b.coupling_power_w,
                                 b.coupling_waist_m, TWO_PI * b.delta1_hz,
                                 TWO_PI * b.delta2_hz, TWO_PI * b.delta3_hz)

    def detector_model(self, seed: int | None = None) -> receiver.DetectorModel:
        d = self.detector
        return receiver.DetectorModel(
            d.responsivity_a_per_w, d.gain_v_per_a, d.bandwidth_hz, d.dark_current_a,
            d.load_resistance_ohm, d.temperature_k,
            self.numerics.seed if seed is None else seed, d.polarity, d.calibration)

    def pulse_pairs(self) -> list[tuple[float, float]]:
        return [(w / 1e9, p / 1e9) for w, p in self.schedule.pulse_pairs_ns]

    def rf_rabi_for_power(self, power_dbm: float) -> float:
        """RF Rabi frequency (rad/s) for an incident power in dBm."""
        e = float(receiver.power_to_efield(receiver.dbm_to_watts(power_dbm),
                                           self.rf.area_m2))
        if self.rf.conversion == "dipole":
            return float(self.ladder().rabi_from_field("43", e))
        return TWO_PI * self.rf.benchmark_rabi_hz * e / self.rf.calibration_field_v_per_m


# ---------------------------------------------------------------------------
# loading and validation


def _check_type(section: str, key: str, value, default, errors: list[str]):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and not isinstance(default, bool):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        errors.append(f"{where}: expected {type(default).__name__ if default is not None else 'number'}, "
                      f"got {type(value).__name__}")
    return ok


def config_from_dict(data: dict) -> ExperimentConfig:
    """Apply ``data`` over the defaults; unknown sections or keys are errors."""
    errors: list[str] = []
    cfg = ExperimentConfig()
    for sec_name, sec_data in data.items():
        if sec_name not in SECTIONS:
            errors.append(f"unknown section [{sec_name}]")
            continue
        if not isinstance(sec_data, dict):
            errors.append(f"[{sec_name}] must be a table")
            continue
        sec = getattr(cfg, sec_name)
        known = {f.name for f in dataclasses.fields(sec)}
        for key, value in sec_data.items():
            if key not in known:
                errors.append(f"unknown key '{key}' in [{sec_name}]")
                continue
            if _check_type(sec_name, key, value, getattr(sec, key), errors):
                if isinstance(getattr(sec, key), float) and isinstance(value, int):
                    value = float(value)
                setattr(sec, key, value)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _positive(errors, where, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        errors.append(f"{where}: must be a positive finite number, got {value!r}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check physical consistency; raises ConfigError listing every violation."""
    errors: list[str] = []
    a, c, b, d, s, rf, n = (cfg.atomic, cfg.cell, cfg.beams, cfg.detector, cfg.schedule,
                            cfg.rf, cfg.numerics)
    for sec_name in ("atomic", "cell", "beams", "detector"):
        sec = getattr(cfg, sec_name)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                errors.append(f"{sec_name}.{f.name}: must be finite")
    for key in ("dipole_d21", "dipole_d32", "dipole_d43", "gamma_21_hz", "gamma_32_hz",
                "gamma_43_hz", "atom_mass_u", "beam_waist_m", "probe_wavelength_m",
                "coupling_wavelength_m"):
        _positive(errors, f"atomic.{key}", getattr(a, key))
    if len(a.dephasing_hz) != 3 or any(not isinstance(g, (int, float)) or g < 0
                                       for g in a.dephasing_hz):
        errors.append("atomic.dephasing_hz: need three non-negative rates")
    if a.transit_rate_hz is not None and a.transit_rate_hz < 0:
        errors.append("atomic.transit_rate_hz: must be non-negative")
    _positive(errors, "cell.length_m", c.length_m)
    _positive(errors, "cell.temperature_k", c.temperature_k)
    if not 0 < c.isotope_fraction <= 1:
        errors.append("cell.isotope_fraction: must lie in (0, 1]")
    if c.density_m3 is not None:
        _positive(errors, "cell.density_m3", c.density_m3)
    for key in ("probe_power_w", "probe_waist_m", "coupling_power_w", "coupling_waist_m"):
        _positive(errors, f"beams.{key}", getattr(b, key))
    for key in ("responsivity_a_per_w", "gain_v_per_a", "bandwidth_hz", "load_resistance_ohm",
                "calibration"):
        _positive(errors, f"detector.{key}", getattr(d, key))
    if d.dark_current_a < 0 or d.temperature_k < 0:
        errors.append("detector: dark_current_a and temperature_k must be non-negative")
    if d.polarity not in (1, -1):
        errors.append("detector.polarity: must be +1 or -1")

    for i, pair in enumerate(s.pulse_pairs_ns):
        if not (isinstance(pair, list) and len(pair) == 2):
            errors.append(f"schedule.pulse_pairs_ns[{i}]: need [width, period]")
            continue
        w, p = pair
        if not (w > 0 and p > 0):
            errors.append(f"schedule.pulse_pairs_ns[{i}]: width and period must be positive")
        elif w >= p:
            errors.append(f"schedule.pulse_pairs_ns[{i}]: pulse width {w:g} ns must be "
                          f"shorter than the period 1/f_r = {p:g} ns")
        else:
            try:
                receiver.pulse_sample_dt(w * 1e-9, p * 1e-9, n.sample_dt_s)
            except StmError as exc:
                errors.append(f"schedule.pulse_pairs_ns[{i}]: {exc}")
    _positive(errors, "schedule.repetition_rate_hz", s.repetition_rate_hz)

    if not rf.rates_hz:
        errors.append("rf.rates_hz: must not be empty")
    if not rf.powers_dbm:
        errors.append("rf.powers_dbm: must not be empty")
    if len(set(rf.rates_hz)) != len(rf.rates_hz) or len(set(rf.powers_dbm)) != len(rf.powers_dbm):
        errors.append("rf: duplicate entries in rates_hz or powers_dbm")
    for r in rf.rates_hz:
        if not (isinstance(r, (int, float)) and r > 0):
            errors.append(f"rf.rates_hz: {r!r} is not a positive rate")
            continue
        if s.repetition_rate_hz > 0:
            ratio = r / s.repetition_rate_hz
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                errors.append(f"rf.rates_hz: f_s/f_r = {r:g}/{s.repetition_rate_hz:g} "
                              "is not an integer")
            elif round(ratio) < 2:
                errors.append(f"rf.rates_hz: rate {r:g} Hz needs at least two beams "
                              f"(pulse width 1/f_s must be below 1/f_r)")
            else:
                try:
                    receiver.pulse_sample_dt(1.0 / r, 1.0 / s.repetition_rate_hz,
                                             n.sample_dt_s)
                except StmError as exc:
                    errors.append(f"rf.rates_hz: {exc}")
    for p in rf.powers_dbm:
        if not (isinstance(p, (int, float)) and math.isfinite(p)):
            errors.append(f"rf.powers_dbm: {p!r} is not a finite number")
    _positive(errors, "rf.benchmark_rabi_hz", rf.benchmark_rabi_hz)
    _positive(errors, "rf.area_m2", rf.area_m2)
    _positive(errors, "rf.calibration_field_v_per_m", rf.calibration_field_v_per_m)
    if rf.conversion not in RF_CONVERSIONS:
        errors.append(f"rf.conversion: must be one of {RF_CONVERSIONS}")
    if not rf.bits or any(bit not in (0, 1) for bit in rf.bits):
        errors.append("rf.bits: need a non-empty list of 0/1")

    _positive(errors, "numerics.dt_factor", n.dt_factor)
    if n.dt_factor > 1:
        errors.append("numerics.dt_factor: must not exceed 1 (dt_max is a hard bound)")
    for key in ("n_velocity_classes", "spectrum_velocity_classes"):
        v = getattr(n, key)
        if v < 3 or v % 2 == 0:
            errors.append(f"numerics.{key}: need an odd count >= 3")
    if n.spectrum_points < 5:
        errors.append("numerics.spectrum_points: need at least 5")
    _positive(errors, "numerics.spectrum_span_hz", n.spectrum_span_hz)
    if n.min_repetitions < 1:
        errors.append("numerics.min_repetitions: must be >= 1")
    if n.repetitions < n.min_repetitions:
        errors.append(f"numerics.repetitions: {n.repetitions} is below min_repetitions "
                      f"{n.min_repetitions}")
    if not 0 <= n.seed < 2**64:
        errors.append("numerics.seed: must be an unsigned 64-bit integer")
    _positive(errors, "numerics.sample_dt_s", n.sample_dt_s)
    if n.threads < 1:
        errors.append("numerics.threads: must be >= 1")
    if n.noise_mode not in NOISE_MODES:
        errors.append(f"numerics.noise_mode: must be one of {NOISE_MODES}")
    if cfg.output.format != "csv":
        errors.append("output.format: only 'csv' is supported")

    if errors:
        raise ConfigError("configuration failed validation:\n  " + "\n  ".join(errors))
    try:
        cfg.ladder(), cfg.cell_params(), cfg.beam_params(), cfg.detector_model()
    except StmError as exc:
        raise ConfigError(f"configuration failed validation:\n  {exc}") from exc
    return cfg


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return validate_config(config_from_dict(data))


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read and validate a TOML config; ``None`` gives the defaults."""
    if path is None:
        return validate_config(ExperimentConfig())
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc})") from exc
    try:
        return loads_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
