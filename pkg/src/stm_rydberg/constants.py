"""Physical constants and rubidium-85 reference data used across the package."""

import numpy as np
from scipy import constants as _c

HBAR = _c.hbar
K_B = _c.k
EPS0 = _c.epsilon_0
C_LIGHT = _c.c
E_CHARGE = _c.e
A0 = _c.physical_constants["Bohr radius"][0]
AMU = _c.atomic_mass

TWO_PI = 2.0 * np.pi

#: Dipole unit used for the ladder matrix elements.
EA0 = E_CHARGE * A0

RB85_MASS = 84.911789732 * AMU
RB85_ABUNDANCE = 0.7217

#: 5S1/2 -> 5P3/2 (D2) vacuum wavelength.
PROBE_WAVELENGTH = 780.241e-9
#: 5P3/2 -> 49D5/2 coupling wavelength.
COUPLING_WAVELENGTH = 480.2e-9

#: RF "incident power" area: probe-beam diameter x cell length.
RF_AREA = 0.41e-3 * 7.5e-2

TORR = 133.322368
ATM = 101325.0
RB_MELTING_POINT = 312.45


def rb_vapor_pressure(temperature: float) -> float:
    """Saturated rubidium vapor pressure in Pa.

    Two-branch Alcock fit, log10(P / atm) = A - B / T, with the solid
    branch below the melting point and the liquid branch above it.
    """
    t = float(temperature)
    if not t > 0:
        raise ValueError("temperature must be positive")
    a, b = (4.857, 4215.0) if t < RB_MELTING_POINT else (4.312, 4040.0)
    return 10.0 ** (a - b / t) * ATM


def rb_number_density(temperature: float) -> float:
    """Total rubidium atom number density (m^-3) at saturated vapor pressure."""
    return rb_vapor_pressure(temperature) / (K_B * temperature)
