"""Four-level ladder dynamics: Hamiltonian, dissipators and RK4 integration.

States are indexed 0..3 for the ladder levels |1>..|4>. Density matrices
are complex arrays of shape ``(..., 4, 4)``; leading axes are batch axes
(typically velocity classes). All frequencies are angular (rad/s) and the
Hamiltonian is returned as H/hbar.

Two integration routes are provided. :func:`integrate_rk4` is the
stage-by-stage reference integrator and accepts smooth (callable) drives.
:func:`propagate` is the production path for piecewise-constant drives:
on each constant segment the master equation is linear and autonomous,
so one classical RK4 step is the fixed matrix polynomial
``I + hL + (hL)^2/2 + (hL)^3/6 + (hL)^4/24`` acting on vec(rho). Raising
it to integer powers reproduces many RK4 steps at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .constants import (
    COUPLING_WAVELENGTH,
    EA0,
    HBAR,
    K_B,
    PROBE_WAVELENGTH,
    RB85_MASS,
    TWO_PI,
)
from .errors import InvalidParameterError, NumericalInstabilityError, StepSizeError

NLEVELS = 4

HERMITICITY_TOL = 1e-12
TRACE_TOL = 1e-9
POPULATION_TOL = 1e-9
POSITIVITY_TOL = 1e-7
POSITIVITY_CHECK_EVERY = 100
#: dt_max = 1 / (STEPS_PER_PERIOD * f_max)
STEPS_PER_PERIOD = 50


def _require_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise InvalidParameterError(f"{name} must be finite, got {value!r}")


def _require_positive(name: str, value) -> None:
    _require_finite(name, value)
    if not np.all(np.asarray(value) > 0):
        raise InvalidParameterError(f"{name} must be strictly positive, got {value!r}")


def transit_rate_from_geometry(temperature: float, mass: float, waist: float) -> float:
    """Transit dephasing rate (rad/s) for thermal atoms crossing a Gaussian beam.

    Mean thermal speed divided by the beam's FWHM-equivalent size
    ``w * sqrt(2 ln 2)``, with ``w`` the 1/e^2 intensity radius.
    """
    for name, val in (("temperature", temperature), ("mass", mass), ("waist", waist)):
        _require_positive(name, val)
    mean_speed = math.sqrt(8.0 * K_B * temperature / (math.pi * mass))
    return mean_speed / (waist * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class LadderConfig:
    """Atomic constants, rates and geometry of the 5S-5P-nD-n'P ladder.

    Dipoles are in units of e*a0, rates in rad/s. ``transit_rate=None``
    derives the transit rate from temperature, mass and beam waist.
    """

    dipole_d21: float = 1.93
    dipole_d32: float = 0.0102
    dipole_d43: float = 1372.2
    gamma_21: float = TWO_PI * 6.066e6
    gamma_32: float = TWO_PI * 500e3
    gamma_43: float = TWO_PI * 500e3
    dephasing_gamma: tuple[float, float, float] = (0.0, 0.0, 0.0)
    transit_rate: float | None = None
    temperature: float = 295.0
    atom_mass: float = RB85_MASS
    beam_waist: float = 190e-6
    cell_length: float = 0.075
    probe_wavelength: float = PROBE_WAVELENGTH
    coupling_wavelength: float = COUPLING_WAVELENGTH

    def __post_init__(self):
        for name in ("dipole_d21", "dipole_d32", "dipole_d43", "gamma_21", "gamma_32",
                     "gamma_43", "temperature", "atom_mass", "beam_waist", "cell_length",
                     "probe_wavelength", "coupling_wavelength"):
            _require_positive(name, getattr(self, name))
        deph = tuple(float(g) for g in self.dephasing_gamma)
        if len(deph) != 3:
            raise InvalidParameterError("dephasing_gamma needs one rate per level |2>,|3>,|4>")
        _require_finite("dephasing_gamma", deph)
        if min(deph) < 0:
            raise InvalidParameterError("dephasing rates must be non-negative")
        object.__setattr__(self, "dephasing_gamma", deph)
        if self.transit_rate is None:
            rate = transit_rate_from_geometry(self.temperature, self.atom_mass, self.beam_waist)
            object.__setattr__(self, "transit_rate", rate)
        else:
            _require_finite("transit_rate", self.transit_rate)
            if self.transit_rate < 0:
                raise InvalidParameterError("transit_rate must be non-negative")
            object.__setattr__(self, "transit_rate", float(self.transit_rate))

    @property
    def decay_channels(self) -> tuple[tuple[int, int, float], ...]:
        """(upper, lower, rate) for the three cascade decays, 0-based."""
        return ((1, 0, self.gamma_21), (2, 1, self.gamma_32), (3, 2, self.gamma_43))

    def rabi_from_field(self, transition: str, field_amplitude):
        """Rabi frequency d*E/hbar for ``transition`` in {"21", "32", "43"}."""
        d = {"21": self.dipole_d21, "32": self.dipole_d32, "43": self.dipole_d43}[transition]
        return d * EA0 * np.asarray(field_amplitude, dtype=float) / HBAR

    def field_from_rabi(self, transition: str, rabi):
        d = {"21": self.dipole_d21, "32": self.dipole_d32, "43": self.dipole_d43}[transition]
        return np.asarray(rabi, dtype=float) * HBAR / (d * EA0)


@dataclass(frozen=True)
class Detunings:
    """Single-photon detunings (rad/s); may be arrays that broadcast together."""

    delta1: np.ndarray | float = 0.0
    delta2: np.ndarray | float = 0.0
    delta3: np.ndarray | float = 0.0

    def __post_init__(self):
        for name in ("delta1", "delta2", "delta3"):
            val = getattr(self, name)
            _require_finite(name, val)
            if np.ndim(val):
                object.__setattr__(self, name, np.asarray(val, dtype=float))

    @property
    def two_photon(self):
        return self.delta1 + self.delta2

    @property
    def three_photon(self):
        return self.delta1 + self.delta2 - self.delta3

    @property
    def shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(np.shape(self.delta1), np.shape(self.delta2),
                                   np.shape(self.delta3))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(x)) for x in (
            self.delta1, self.delta2, self.delta3, self.two_photon, self.three_photon)))


# ---------------------------------------------------------------------------
# drives


class Envelope:
    """Piecewise-constant, right-continuous envelope; zero outside its edges.

    ``values[k]`` holds on ``[edges[k], edges[k+1])``.
    """

    def __init__(self, edges, values):
        edges = np.asarray(edges, dtype=float)
        values = np.asarray(values, dtype=float)
        if edges.ndim != 1 or values.ndim != 1 or len(edges) != len(values) + 1:
            raise InvalidParameterError("envelope needs len(edges) == len(values) + 1")
        if len(values) and np.any(np.diff(edges) <= 0):
            raise InvalidParameterError("envelope edges must be strictly increasing")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidParameterError("envelope values must be finite and non-negative")
        self.edges = edges
        self.values = values

    @classmethod
    def constant(cls, value: float) -> "Envelope":
        return cls([-np.inf, np.inf], [value])

    @classmethod
    def from_samples(cls, t0: float, dt: float, values) -> "Envelope":
        values = np.asarray(values, dtype=float)
        return cls(t0 + dt * np.arange(len(values) + 1), values)

    @classmethod
    def pulse_train(cls, amplitude: float, width: float, period: float, n_pulses: int = 1,
                    start: float = 0.0, rise_time: float = 0.0,
                    ramp_segments: int = 8) -> "Envelope":
        """Square pulses, optionally with linear edges of ``rise_time``.

        The ramps are sampled at their midpoints into ``ramp_segments``
        constant pieces each so the envelope stays piecewise constant.
        """
        if width <= 0 or period < width or n_pulses < 1:
            raise InvalidParameterError("need width > 0, period >= width and n_pulses >= 1")
        if rise_time < 0 or 2 * rise_time > width:
            raise InvalidParameterError("rise_time must lie in [0, width/2]")
        segments = []
        ramp = amplitude * (np.arange(ramp_segments) + 0.5) / ramp_segments
        piece = rise_time / ramp_segments
        for k in range(n_pulses):
            t0 = start + k * period
            t_fall = t0 + width - rise_time
            if rise_time > 0:
                segments += [(t0 + i * piece, t0 + (i + 1) * piece, v) for i, v in enumerate(ramp)]
            if t_fall > t0 + rise_time:
                segments.append((t0 + rise_time, t_fall, amplitude))
            if rise_time > 0:
                segments += [(t_fall + i * piece, t_fall + (i + 1) * piece, v)
                             for i, v in enumerate(ramp[::-1])]
        edges = [segments[0][0]]
        values: list[float] = []
        for s, e, v in segments:
            if s > edges[-1]:
                values.append(0.0)
                edges.append(s)
            values.append(v)
            edges.append(e)
        return cls(edges, values)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.edges[np.isfinite(self.edges)]

    @property
    def peak(self) -> float:
        return float(self.values.max()) if len(self.values) else 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.edges, t, side="right") - 1
        inside = (idx >= 0) & (idx < len(self.values))
        out = np.where(inside, self.values[np.clip(idx, 0, max(len(self.values) - 1, 0))], 0.0)
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"Envelope({len(self.values)} segments, peak={self.peak:.4g})"


EnvelopeLike = Union[Envelope, Callable[[float], float], float]


def _as_envelope(env: EnvelopeLike):
    if isinstance(env, Envelope) or callable(env):
        return env
    return Envelope.constant(float(env))


@dataclass(frozen=True)
class DriveSet:
    """Probe, coupling and RF Rabi-frequency envelopes (rad/s).

    Each entry is an :class:`Envelope` (piecewise constant; RK4 stages all
    use the value at the left end of the step), a smooth callable of time
    (evaluated at the RK4 stage times), or a plain number.
    """

    omega_p: EnvelopeLike = 0.0
    omega_c: EnvelopeLike = 0.0
    omega_rf: EnvelopeLike = 0.0

    def __post_init__(self):
        for name in ("omega_p", "omega_c", "omega_rf"):
            object.__setattr__(self, name, _as_envelope(getattr(self, name)))

    @property
    def envelopes(self):
        return (self.omega_p, self.omega_c, self.omega_rf)

    @property
    def piecewise(self) -> bool:
        return all(isinstance(e, Envelope) for e in self.envelopes)

    def at(self, t: float) -> tuple[float, float, float]:
        vals = tuple(float(e(t)) for e in self.envelopes)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise InvalidParameterError(f"drive values must be finite and >= 0, got {vals}")
        return vals

    def peaks(self, t_span=None, n_probe: int = 2001) -> tuple[float, float, float]:
        out = []
        for e in self.envelopes:
            if isinstance(e, Envelope):
                out.append(e.peak)
            else:
                t = np.linspace(*(t_span or (0.0, 1.0)), n_probe)
                out.append(float(np.max(np.abs([e(x) for x in t]))))
        return tuple(out)

    def breakpoints(self) -> np.ndarray:
        pts = [e.breakpoints for e in self.envelopes if isinstance(e, Envelope)]
        return np.unique(np.concatenate(pts)) if pts else np.empty(0)


# ---------------------------------------------------------------------------
# generator pieces


def build_hamiltonian(d: Detunings, omega_p, omega_c, omega_rf) -> np.ndarray:
    """H/hbar in the rotating frame, shape ``broadcast(...) + (4, 4)``."""
    for name, val in (("omega_p", omega_p), ("omega_c", omega_c), ("omega_rf", omega_rf)):
        _require_finite(name, val)
    shape = np.broadcast_shapes(d.shape, np.shape(omega_p), np.shape(omega_c),
                                np.shape(omega_rf))
    h = np.zeros(shape + (NLEVELS, NLEVELS), dtype=complex)
    h[..., 1, 1] = d.delta1
    h[..., 2, 2] = d.two_photon
    h[..., 3, 3] = d.three_photon
    for (i, j), om in (((1, 0), omega_p), ((2, 1), omega_c), ((3, 2), omega_rf)):
        h[..., i, j] = -0.5 * np.asarray(om)
        h[..., j, i] = -0.5 * np.asarray(om)
    return h


def lindblad_dissipator(rho: np.ndarray, cfg: LadderConfig) -> np.ndarray:
    """Spontaneous decay along the cascade plus pure dephasing of |2>..|4>."""
    out = np.zeros_like(rho, dtype=complex)
    pops = rho[..., range(NLEVELS), range(NLEVELS)]
    for upper, lower, rate in cfg.decay_channels:
        # sigma_ji rho sigma_ij refills the lower level
        out[..., lower, lower] += rate * pops[..., upper]
        # -1/2 {sigma_ii, rho}: row and column `upper` decay at rate/2
        out[..., upper, :] -= 0.5 * rate * rho[..., upper, :]
        out[..., :, upper] -= 0.5 * rate * rho[..., :, upper]
    for level, rate in enumerate(cfg.dephasing_gamma, start=1):
        if rate == 0:
            continue
        out[..., level, level] += rate * pops[..., level]
        out[..., level, :] -= 0.5 * rate * rho[..., level, :]
        out[..., :, level] -= 0.5 * rate * rho[..., :, level]
    return out


def transit_dephasing(rho: np.ndarray, cfg: LadderConfig) -> np.ndarray:
    """Relaxation toward |1><1| at the transit rate.

    Atoms leaving the beam are replaced by fresh ground-state atoms:
    ``gamma_t * (Tr(rho) |1><1| - rho)``.
    """
    g = cfg.transit_rate
    out = -g * rho.astype(complex, copy=True)
    out[..., 0, 0] += g * np.trace(rho, axis1=-2, axis2=-1)
    return out


def _commutator(h, rho):
    return h @ rho - rho @ h


def master_rhs(rho: np.ndarray, d: Detunings, omegas, cfg: LadderConfig) -> np.ndarray:
    """d(rho)/dt = -i[H/hbar, rho] + L(rho) + L_t(rho)."""
    h = build_hamiltonian(d, *omegas)
    return -1j * _commutator(h, rho) + lindblad_dissipator(rho, cfg) + transit_dephasing(rho, cfg)


# ---------------------------------------------------------------------------
# superoperator form (row-major vec: vec(A rho B) = kron(A, B.T) vec(rho))

_EYE = np.eye(NLEVELS)


def _unit(i, j):
    m = np.zeros((NLEVELS, NLEVELS))
    m[i, j] = 1.0
    return m


def _comm_super(h):
    return -1j * (np.kron(h, _EYE) - np.kron(_EYE, h.T))


# coefficient order: delta1, two-photon, three-photon, omega_p, omega_c, omega_rf
_HAM_BASIS = np.stack([
    _comm_super(_unit(1, 1)),
    _comm_super(_unit(2, 2)),
    _comm_super(_unit(3, 3)),
    _comm_super(-0.5 * (_unit(1, 0) + _unit(0, 1))),
    _comm_super(-0.5 * (_unit(2, 1) + _unit(1, 2))),
    _comm_super(-0.5 * (_unit(3, 2) + _unit(2, 3))),
])


def dissipator_superoperator(cfg: LadderConfig) -> np.ndarray:
    """16x16 matrix of the decay, dephasing and transit terms."""
    sup = np.zeros((NLEVELS**2, NLEVELS**2), dtype=complex)

    def add_channel(c, rate):
        cdc = c.T @ c
        sup[:] += rate * (np.kron(c, c) - 0.5 * np.kron(cdc, _EYE) - 0.5 * np.kron(_EYE, cdc.T))

    for upper, lower, rate in cfg.decay_channels:
        add_channel(_unit(lower, upper), rate)
    for level, rate in enumerate(cfg.dephasing_gamma, start=1):
        add_channel(_unit(level, level), rate)
    g = cfg.transit_rate
    sup -= g * np.eye(NLEVELS**2)
    sup[0, [k * NLEVELS + k for k in range(NLEVELS)]] += g
    return sup


def liouvillian(d: Detunings, omegas, cfg: LadderConfig, dissipator=None) -> np.ndarray:
    """Full generator as a batch of 16x16 matrices acting on vec(rho)."""
    shape = np.broadcast_shapes(d.shape, *(np.shape(o) for o in omegas))
    coeffs = [d.delta1, d.two_photon, d.three_photon, *omegas]
    coeffs = np.stack([np.broadcast_to(np.asarray(c, dtype=float), shape) for c in coeffs], -1)
    if dissipator is None:
        dissipator = dissipator_superoperator(cfg)
    return np.einsum("...k,kij->...ij", coeffs, _HAM_BASIS) + dissipator


def rk4_step_operator(generator: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step for x' = A x with constant A, as a matrix."""
    eye = np.eye(generator.shape[-1])
    hl = dt * generator
    return eye + hl @ (eye + hl @ (eye + hl @ (eye + hl / 4) / 3) / 2)


# ---------------------------------------------------------------------------
# integration


def ground_state(batch_shape: tuple[int, ...] = ()) -> np.ndarray:
    rho = np.zeros(batch_shape + (NLEVELS, NLEVELS), dtype=complex)
    rho[..., 0, 0] = 1.0
    return rho


def max_step(d: Detunings, drives: DriveSet, cfg: LadderConfig, t_span=None) -> float:
    """Largest allowed RK4 step: 1 / (50 f_max).

    f_max is the fastest of the detunings (single-, two- and three-photon),
    the peak Rabi frequencies and the relaxation rates, divided by 2 pi.
    """
    rates = [d.max_abs(), *drives.peaks(t_span), cfg.gamma_21, cfg.gamma_32, cfg.gamma_43,
             *cfg.dephasing_gamma, cfg.transit_rate]
    f_max = max(rates) / TWO_PI
    return 1.0 / (STEPS_PER_PERIOD * f_max)


@dataclass
class Trajectory:
    """Density matrices sampled at ``times``; rho has shape (n_t, *batch, 4, 4)."""

    times: np.ndarray
    rho: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    @property
    def rho21(self) -> np.ndarray:
        return self.rho[..., 1, 0]

    @property
    def populations(self) -> np.ndarray:
        return self.rho[..., range(NLEVELS), range(NLEVELS)].real


def _check_state(rho: np.ndarray, step: int, check_positivity: bool) -> None:
    herm = np.max(np.abs(rho - np.conj(np.swapaxes(rho, -1, -2)))) if rho.size else 0.0
    if not herm < HERMITICITY_TOL:
        raise NumericalInstabilityError(
            f"Hermiticity defect {herm:.3e} at step {step}", step)
    tr = np.trace(rho, axis1=-2, axis2=-1)
    err = np.max(np.abs(tr - 1.0))
    if not err < TRACE_TOL:
        raise NumericalInstabilityError(f"trace drift {err:.3e} at step {step}", step)
    pops = rho[..., range(NLEVELS), range(NLEVELS)].real
    if pops.min() < -POPULATION_TOL or pops.max() > 1 + POPULATION_TOL:
        raise NumericalInstabilityError(f"population out of [0, 1] at step {step}", step)
    if check_positivity:
        lam = np.linalg.eigvalsh(rho).min()
        if lam < -POSITIVITY_TOL:
            raise NumericalInstabilityError(
                f"negative eigenvalue {lam:.3e} at step {step}", step)


def _hermitize(rho):
    return 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))


def _validate_dt(dt, d, drives, cfg, t_span):
    if not dt > 0:
        raise StepSizeError(f"dt must be positive, got {dt}")
    limit = max_step(d, drives, cfg, t_span)
    if dt > limit * (1 + 1e-9):
        raise StepSizeError(f"dt={dt:.3e} s exceeds dt_max={limit:.3e} s")
    return limit


def integrate_rk4(rho0, d: Detunings, drives: DriveSet, cfg: LadderConfig, t_span,
                  dt: float, *, sample_every: int = 1, check: bool = True) -> Trajectory:
    """Fixed-step classical RK4 on the master equation.

    Returns rho at every ``sample_every``-th step, including t_span[0].
    The number of steps is ``round((t1 - t0) / dt)``; the span must be an
    integer number of steps to within 1e-6 of a step.

    Raises:
        StepSizeError: dt non-positive or above :func:`max_step`.
        NumericalInstabilityError: trace, Hermiticity, population or
            positivity invariant broken; carries the first bad step.
    """
    t0, t1 = map(float, t_span)
    _validate_dt(dt, d, drives, cfg, (t0, t1))
    n_steps = int(round((t1 - t0) / dt))
    if abs(n_steps * dt - (t1 - t0)) > 1e-6 * dt:
        raise StepSizeError("t_span is not an integer number of steps")

    rho = np.array(np.broadcast_to(rho0, d.shape + (NLEVELS, NLEVELS)), dtype=complex)
    piecewise = [isinstance(e, Envelope) for e in drives.envelopes]

    def omegas_at(t, t_left):
        return tuple(float(e(t_left if pw else t)) for e, pw in zip(drives.envelopes, piecewise))

    times = [t0]
    out = [rho.copy()]
    for n in range(n_steps):
        t = t0 + n * dt
        om1 = omegas_at(t, t)
        om2 = omegas_at(t + 0.5 * dt, t)
        om4 = omegas_at(t + dt, t)
        k1 = master_rhs(rho, d, om1, cfg)
        k2 = master_rhs(rho + 0.5 * dt * k1, d, om2, cfg)
        k3 = master_rhs(rho + 0.5 * dt * k2, d, om2, cfg)
        k4 = master_rhs(rho + dt * k3, d, om4, cfg)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if check:
            _check_state(rho, n + 1, (n + 1) % POSITIVITY_CHECK_EVERY == 0)
        rho = _hermitize(rho)
        if (n + 1) % sample_every == 0:
            times.append(t0 + (n + 1) * dt)
            out.append(rho.copy())
    return Trajectory(np.asarray(times), np.asarray(out), dt)


# real parametrisation of Hermitian rho: diagonal, Re and Im of the upper triangle
_UPPER = np.triu_indices(NLEVELS, 1)


def _real_transform() -> tuple[np.ndarray, np.ndarray]:
    m = np.zeros((NLEVELS**2, NLEVELS**2), dtype=complex)
    for k in range(NLEVELS):
        m[k, k * NLEVELS + k] = 1.0
    for p, (i, j) in enumerate(zip(*_UPPER)):
        m[4 + p, i * NLEVELS + j] = m[4 + p, j * NLEVELS + i] = 0.5
        m[10 + p, i * NLEVELS + j] = -0.5j
        m[10 + p, j * NLEVELS + i] = 0.5j
    return m, np.linalg.inv(m)


_TO_REAL, _FROM_REAL = _real_transform()


def to_real(rho: np.ndarray) -> np.ndarray:
    """Hermitian (..., 4, 4) -> real (..., 16) coordinates."""
    r = np.empty(rho.shape[:-2] + (NLEVELS**2,))
    r[..., :4] = rho[..., range(NLEVELS), range(NLEVELS)].real
    upper = rho[..., _UPPER[0], _UPPER[1]]
    r[..., 4:10] = upper.real
    r[..., 10:16] = upper.imag
    return r


def from_real(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_real`; the result is exactly Hermitian."""
    rho = np.empty(r.shape[:-1] + (NLEVELS, NLEVELS), dtype=complex)
    rho[..., range(NLEVELS), range(NLEVELS)] = r[..., :4]
    rho[..., _UPPER[0], _UPPER[1]] = r[..., 4:10] + 1j * r[..., 10:16]
    rho[..., _UPPER[1], _UPPER[0]] = r[..., 4:10] - 1j * r[..., 10:16]
    return rho


def real_generator(generator: np.ndarray) -> np.ndarray:
    """Express a Hermiticity-preserving 16x16 generator in real coordinates."""
    g = _TO_REAL @ generator @ _FROM_REAL
    return np.ascontiguousarray(g.real)


def _check_chunk(r: np.ndarray, first_sample: int, sub: int) -> None:
    """Vectorised invariant checks over a chunk of real-coordinate samples."""
    pops = r[..., :4]
    axes = tuple(range(1, pops.ndim))
    trace_err = np.abs(pops.sum(-1) - 1.0)
    bad = (trace_err.max(axis=axes[:-1]) if pops.ndim > 2 else trace_err) >= TRACE_TOL
    bad |= pops.min(axis=axes) < -POPULATION_TOL
    bad |= pops.max(axis=axes) > 1 + POPULATION_TOL
    samples = first_sample + np.arange(len(r))
    check = np.nonzero(samples % POSITIVITY_CHECK_EVERY == 0)[0]
    if len(check):
        lam = np.linalg.eigvalsh(from_real(r[check]))
        neg = lam.reshape(len(check), -1).min(axis=1) < -POSITIVITY_TOL
        bad[check[neg]] = True
    if bad.any():
        k = int(np.argmax(bad))
        step = int(samples[k]) * sub
        err = float(np.max(trace_err[k]))
        raise NumericalInstabilityError(
            f"density-matrix invariant violated at step {step} "
            f"(trace error {err:.3e}, min population {pops[k].min():.3e})", step)


CHUNK = 256


def propagate(rho0, d: Detunings, drives: DriveSet, cfg: LadderConfig, t_span,
              sample_dt: float, *, dt: float | None = None, weights=None,
              check: bool = True) -> Trajectory:
    """RK4 over piecewise-constant drives, sampled every ``sample_dt``.

    ``dt`` defaults to the largest ``sample_dt / m`` (integer m) not above
    :func:`max_step`. Drive breakpoints inside the span must fall on the
    sample grid. The state is carried in real Hermitian coordinates, so
    Hermiticity holds exactly; trace, population range and (every 100th
    sample) positivity are checked.

    With ``weights`` (one per element of the 1-D batch) only the weighted
    batch average of rho is kept, which is what Doppler averaging needs
    and avoids storing every velocity class.
    """
    if not drives.piecewise:
        raise InvalidParameterError("propagate needs piecewise-constant envelopes; "
                                    "use integrate_rk4 for smooth drives")
    t0, t1 = map(float, t_span)
    n_samples = int(round((t1 - t0) / sample_dt))
    if n_samples < 1 or abs(n_samples * sample_dt - (t1 - t0)) > 1e-6 * sample_dt:
        raise StepSizeError("t_span must be a positive integer number of samples")
    limit = max_step(d, drives, cfg)
    if dt is None:
        sub = max(1, math.ceil(sample_dt / limit * (1 - 1e-12)))
        dt = sample_dt / sub
    else:
        sub = int(round(sample_dt / dt))
        if sub < 1 or abs(sub * dt - sample_dt) > 1e-9 * sample_dt:
            raise StepSizeError("sample_dt must be an integer multiple of dt")
    _validate_dt(dt, d, drives, cfg, None)

    bps = drives.breakpoints()
    bps = bps[(bps > t0) & (bps < t1)]
    offs = (bps - t0) / sample_dt
    if np.any(np.abs(offs - np.round(offs)) > 1e-6):
        raise StepSizeError("drive breakpoints must fall on the sample grid")

    batch = d.shape
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if len(batch) != 1 or weights.shape != batch:
            raise InvalidParameterError("weights need a 1-D batch of matching length")
        weights = weights / weights.sum()
    times = t0 + sample_dt * np.arange(n_samples + 1)
    # drive on each sample interval; breakpoints sit on the grid, so the
    # midpoint picks the right piece regardless of rounding in the edges
    vals = np.stack([e(times[:-1] + 0.5 * sample_dt) for e in drives.envelopes], axis=-1)
    if not (np.all(np.isfinite(vals)) and np.all(vals >= 0)):
        raise InvalidParameterError("drive values must be finite and non-negative")
    change = np.nonzero(np.any(vals[1:] != vals[:-1], axis=1))[0] + 1
    run_bounds = np.concatenate([[0], change, [n_samples]])

    dis = dissipator_superoperator(cfg)
    cache: dict[tuple[float, ...], np.ndarray] = {}
    x = to_real(np.broadcast_to(np.asarray(rho0, dtype=complex),
                                batch + (NLEVELS, NLEVELS)))[..., None]
    store_shape = (16,) if weights is not None else batch + (16,)
    stored = np.empty((n_samples + 1,) + store_shape)
    buf = np.empty((CHUNK,) + batch + (16,))

    def flush(n_filled, first):
        chunk = buf[:n_filled]
        if check:
            _check_chunk(chunk, first, sub)
        stored[first:first + n_filled] = (
            np.einsum("cvk,v->ck", chunk, weights) if weights is not None else chunk)

    buf[0] = x[..., 0]
    filled, first = 1, 0
    for lo, hi in zip(run_bounds[:-1], run_bounds[1:]):
        key = tuple(vals[lo])
        q = cache.get(key)
        if q is None:
            step = rk4_step_operator(real_generator(liouvillian(d, key, cfg, dis)), dt)
            q = cache[key] = np.linalg.matrix_power(step, sub)
        for _ in range(hi - lo):
            x = q @ x
            buf[filled] = x[..., 0]
            filled += 1
            if filled == CHUNK:
                flush(filled, first)
                first += filled
                filled = 0
    if filled:
        flush(filled, first)
    rho = from_real(stored)
    meta = {"steps_per_sample": sub, "doppler_averaged": weights is not None}
    return Trajectory(times, rho, dt, meta)
