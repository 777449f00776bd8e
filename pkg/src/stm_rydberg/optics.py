"""Probe susceptibility, Beer-Lambert transmission and Doppler averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks
from scipy.special import erf

from . import atomic
from .atomic import Detunings, DriveSet, LadderConfig
from .constants import C_LIGHT, EA0, EPS0, K_B, RB85_ABUNDANCE, TWO_PI, rb_number_density
from .errors import ConvergenceError, DivisionGuardError, InvalidParameterError, ShapeError

log = logging.getLogger(__name__)

#: Half-width of the velocity grid in units of the thermal parameter a.
TRUNCATION = 4.0
TRUNCATED_MASS = erf(TRUNCATION / math.sqrt(2.0))
#: Imaginary susceptibility below this is treated as numerical noise.
GAIN_TOLERANCE = 1e-6


@dataclass(frozen=True)
class VelocityGrid:
    """Axial velocity classes with Maxwell-Boltzmann quadrature weights.

    The weights sum to the Gaussian mass inside the truncation window;
    :func:`doppler_average_rho21` renormalises them to one.
    """

    velocities: np.ndarray
    weights: np.ndarray
    a: float
    truncation: float = TRUNCATION

    def __len__(self):
        return len(self.velocities)


def thermal_velocity(temperature: float, mass: float) -> float:
    """The 1-D Maxwell-Boltzmann width a = sqrt(k_B T / m)."""
    if temperature <= 0 or mass <= 0:
        raise InvalidParameterError("temperature and mass must be positive")
    return math.sqrt(K_B * temperature / mass)


def build_velocity_grid(temperature: float, mass: float, n_classes: int) -> VelocityGrid:
    """Uniform grid on [-4a, 4a] with trapezoid weights of the Gaussian density.

    ``n_classes`` must be odd so that v = 0 is a node.
    """
    if int(n_classes) != n_classes or n_classes < 3 or n_classes % 2 == 0:
        raise InvalidParameterError(f"n_classes must be an odd integer >= 3, got {n_classes}")
    n_classes = int(n_classes)
    a = thermal_velocity(temperature, mass)
    u = np.linspace(-TRUNCATION, TRUNCATION, n_classes)
    # symmetric by construction, not by floating-point luck
    u = 0.5 * (u - u[::-1])
    trap = np.full(n_classes, u[1] - u[0])
    trap[[0, -1]] *= 0.5
    w = trap * np.exp(-0.5 * u**2)
    w *= TRUNCATED_MASS / w.sum()
    return VelocityGrid(a * u, w, a)


def doppler_detunings(base: Detunings, v, probe_wavelength: float,
                      coupling_wavelength: float) -> Detunings:
    """Shift detunings for axial velocity ``v`` (counter-propagating beams)."""
    v = np.asarray(v, dtype=float)
    return Detunings(
        delta1=base.delta1 - TWO_PI / probe_wavelength * v,
        delta2=base.delta2 + TWO_PI / coupling_wavelength * v,
        delta3=np.broadcast_to(base.delta3, np.broadcast_shapes(np.shape(base.delta3), v.shape)),
    )


def doppler_average_rho21(rho21, grid: VelocityGrid) -> np.ndarray:
    """Weighted velocity average of rho21 series.

    ``rho21`` is either an array whose last axis runs over velocity classes
    (e.g. shape (n_t, n_v)) or a sequence of one series per class.
    """
    if isinstance(rho21, (list, tuple)):
        lengths = {len(s) for s in rho21}
        if len(lengths) > 1:
            raise ShapeError(f"per-velocity series have different lengths {sorted(lengths)}")
        rho21 = np.stack([np.asarray(s) for s in rho21], axis=-1)
    rho21 = np.asarray(rho21)
    if rho21.shape[-1] != len(grid):
        raise ShapeError(f"expected {len(grid)} velocity classes, got {rho21.shape[-1]}")
    w = grid.weights / grid.weights.sum()
    return rho21 @ w


@dataclass(frozen=True)
class VaporCellParams:
    """Vapor cell; ``density_n0=None`` uses the saturated Rb vapor density."""

    length: float = 0.075
    temperature: float = 295.0
    isotope_fraction: float = RB85_ABUNDANCE
    density_n0: float | None = None

    def __post_init__(self):
        if not (self.length > 0 and self.temperature > 0):
            raise InvalidParameterError("cell length and temperature must be positive")
        if not 0 < self.isotope_fraction <= 1:
            raise InvalidParameterError("isotope_fraction must lie in (0, 1]")
        if self.density_n0 is not None and not self.density_n0 > 0:
            raise InvalidParameterError("density_n0 must be positive")

    @property
    def n0(self) -> float:
        if self.density_n0 is not None:
            return float(self.density_n0)
        return rb_number_density(self.temperature) * self.isotope_fraction


def peak_field_from_power(power: float, waist: float) -> float:
    """On-axis field amplitude (V/m) of a Gaussian beam, I_peak = 2P/(pi w^2)."""
    if power < 0 or waist <= 0:
        raise InvalidParameterError("power must be >= 0 and waist > 0")
    intensity = 2.0 * power / (math.pi * waist**2)
    return math.sqrt(2.0 * intensity / (C_LIGHT * EPS0))


@dataclass(frozen=True)
class BeamParams:
    """Optical beams: powers, 1/e^2 radii and laser detunings (rad/s)."""

    probe_power: float = 4.7e-6
    probe_waist: float = 190e-6
    coupling_power: float = 0.6
    coupling_waist: float = 200e-6
    delta1: float = 0.0
    delta2: float = 0.0
    delta3: float = 0.0

    @property
    def probe_field(self) -> float:
        return peak_field_from_power(self.probe_power, self.probe_waist)

    def omega_p(self, cfg: LadderConfig) -> float:
        return float(cfg.rabi_from_field("21", self.probe_field))

    def omega_c(self, cfg: LadderConfig) -> float:
        return float(cfg.rabi_from_field("32", peak_field_from_power(self.coupling_power,
                                                                      self.coupling_waist)))

    @property
    def detunings(self) -> Detunings:
        return Detunings(self.delta1, self.delta2, self.delta3)


def susceptibility(rho21_avg, probe_field, cfg: LadderConfig, cell: VaporCellParams,
                   *, probe_off: str = "raise") -> np.ndarray:
    """chi_p = 2 N0 d21 rho21 / (eps0 E_p).

    Where the probe field is zero the susceptibility is undefined: the
    default raises :class:`DivisionGuardError`; ``probe_off="nan"`` marks
    those samples NaN instead.
    """
    rho21_avg = np.asarray(rho21_avg)
    e_p = np.broadcast_to(np.asarray(probe_field, dtype=float), rho21_avg.shape)
    off = ~(e_p > 0)
    if off.any() and probe_off == "raise":
        raise DivisionGuardError("susceptibility evaluated where the probe field is zero")
    scale = 2.0 * cell.n0 * cfg.dipole_d21 * EA0 / EPS0
    with np.errstate(divide="ignore", invalid="ignore"):
        chi = scale * rho21_avg / np.where(off, 1.0, e_p)
    return np.where(off, np.nan + 0j, chi)


@dataclass
class Transmission:
    p_out: np.ndarray
    alpha: np.ndarray
    warnings: list[str] = field(default_factory=list)


def transmit(p_in, chi, probe_wavelength: float, length: float) -> Transmission:
    """Beer-Lambert: P_out = P_in exp(-alpha L), alpha = (2 pi / lambda) Im chi.

    NaN susceptibility (probe off) passes P_in through unchanged. Gain
    beyond :data:`GAIN_TOLERANCE` in Im chi is flagged in ``warnings``
    rather than raised.
    """
    p_in = np.asarray(p_in, dtype=float)
    chi = np.asarray(chi)
    im = np.where(np.isnan(chi), 0.0, np.imag(chi))
    alpha = TWO_PI / probe_wavelength * im
    notes = []
    if np.min(im, initial=0.0) < -GAIN_TOLERANCE:
        notes.append(f"unphysical gain: min Im chi = {np.min(im):.3e}")
    return Transmission(p_in * np.exp(-alpha * length), alpha, notes)


# ---------------------------------------------------------------------------
# steady state and spectra

#: Relative transmission change allowed over the final 10% of the window.
FLATNESS_TOL = 1e-5
MAX_WINDOW = 1e-3


def _transmission_from_rho21(rho21_avg, cfg, cell, beams):
    chi = susceptibility(rho21_avg, beams.probe_field, cfg, cell)
    return float(np.exp(-TWO_PI / cfg.probe_wavelength * np.imag(chi) * cell.length))


def steady_state(d: Detunings, omegas, cfg: LadderConfig, grid: VelocityGrid,
                 cell: VaporCellParams, beams: BeamParams, *, dt: float | None = None,
                 flatness: float = FLATNESS_TOL):
    """Integrate from the ground state until the averaged transmission is flat.

    The window is ten blocks of ``2**j`` RK4 steps, starting at no less than
    10/Gamma_21 and doubling until the transmission changes by less than
    ``flatness`` (relative) across the final block.

    Returns:
        (rho, transmission, window) with rho of shape (n_v, 4, 4).
    """
    drives = DriveSet(*omegas)
    limit = atomic.max_step(d, drives, cfg)
    dt = limit if dt is None else dt
    if dt > limit * (1 + 1e-9):
        raise atomic.StepSizeError(f"dt={dt:.3e} exceeds dt_max={limit:.3e}")
    step = atomic.rk4_step_operator(atomic.liouvillian(d, omegas, cfg), dt)
    block, block_steps = step, 1
    t_min = 10.0 / cfg.gamma_21
    while 10 * block_steps * dt < t_min:
        block, block_steps = block @ block, 2 * block_steps
    x0 = atomic.ground_state(d.shape).reshape(d.shape + (16, 1))
    residual = np.inf
    while 10 * block_steps * dt <= MAX_WINDOW:
        x = x0
        for _ in range(9):
            x = block @ x
        t9 = _transmission_from_rho21(doppler_average_rho21(x[..., 4, 0], grid), cfg, cell, beams)
        x = block @ x
        t10 = _transmission_from_rho21(doppler_average_rho21(x[..., 4, 0], grid), cfg, cell, beams)
        residual = abs(t10 - t9) / t10
        if residual < flatness:
            rho = atomic._hermitize(x.reshape(d.shape + (4, 4)))
            return rho, t10, 10 * block_steps * dt
        block, block_steps = block @ block, 2 * block_steps
    raise ConvergenceError(f"steady state not reached, relative residual {residual:.2e}",
                           residual)


@dataclass
class Spectrum:
    delta2: np.ndarray          # rad/s
    transmission: np.ndarray    # P_out / P_in
    rf_rabi: float
    meta: dict = field(default_factory=dict)


def eit_spectrum(cfg: LadderConfig, cell: VaporCellParams, beams: BeamParams, sweep,
                 rf_on: bool, rf_rabi: float = 0.0, *, n_classes: int = 1601,
                 executor=None) -> Spectrum:
    """Doppler-averaged steady-state probe transmission versus coupling detuning.

    Args:
        sweep: coupling detunings Delta_2 (rad/s).
        rf_on: apply ``rf_rabi`` on the |3>-|4> transition.
        executor: optional ``concurrent.futures`` executor; results are
            assembled in sweep order regardless.
    """
    sweep = np.asarray(sweep, dtype=float)
    rf = float(rf_rabi) if rf_on else 0.0
    if rf_on and (sweep.min() > beams.delta2 - 2 * rf or sweep.max() < beams.delta2 + 2 * rf):
        raise InvalidParameterError("sweep must cover +-2 Omega_RF around resonance")
    grid = build_velocity_grid(cell.temperature, cfg.atom_mass, n_classes)
    omegas = (beams.omega_p(cfg), beams.omega_c(cfg), rf)

    def point(d2):
        base = Detunings(beams.delta1, d2, beams.delta3)
        d = doppler_detunings(base, grid.velocities, cfg.probe_wavelength,
                              cfg.coupling_wavelength)
        return steady_state(d, omegas, cfg, grid, cell, beams)[1]

    mapper = executor.map if executor is not None else map
    trans = np.fromiter(mapper(point, sweep), dtype=float, count=len(sweep))
    return Spectrum(sweep, trans, rf, {"n_classes": n_classes, "omega_p": omegas[0],
                                       "omega_c": omegas[1]})


def spectrum_peaks(spectrum: Spectrum, n_peaks: int = 2) -> np.ndarray:
    """Detunings of the ``n_peaks`` most prominent maxima, parabola-refined."""
    y = spectrum.transmission
    x = spectrum.delta2
    idx, props = find_peaks(y, prominence=0.0)
    if len(idx) < n_peaks:
        raise ConvergenceError(f"found {len(idx)} peaks, need {n_peaks}", float(len(idx)))
    keep = np.sort(idx[np.argsort(props["prominences"])[::-1][:n_peaks]])
    out = []
    for i in keep:
        y0, y1, y2 = y[i - 1:i + 2]
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        out.append(x[i] + shift * (x[i + 1] - x[i]))
    return np.asarray(out)


def at_splitting(spectrum: Spectrum) -> float:
    """Separation (rad/s) of the two Autler-Townes transmission peaks."""
    lo, hi = spectrum_peaks(spectrum, 2)
    return float(hi - lo)
