"""Phonon spectral densities for a double dot in 1D, 2D and 3D.

Each family has the shape

    J(w) = J0 * (w/w_d)^p * G_n(w/w_d) * exp(-w^2 / (2 w_a^2))

with the dimension-dependent geometric factor

    G_3(x) = 1 - sin(x)/x,   G_2(x) = 1 - BesselJ0(x),   G_1(x) = 1 - cos(x),

p = n for deformation-potential coupling and p = n - 2 for piezoelectric
coupling (deformation carries two extra powers of the phonon wavevector in
the squared matrix element).  Material prefactors are absorbed into the
fitted scale ``j0``.

``w_d`` and ``w_a`` are set by the dot separation and extent; the default
convention is w_d = 2*pi*c/d.  The alternative plain convention w_d = c/d
(used by the angular-integral oracle in the tests) is selectable per spec.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import j0 as bessel_j0, j1 as bessel_j1

KINDS = (
    "3d_deformation",
    "3d_piezoelectric",
    "2d_deformation",
    "2d_piezoelectric",
    "1d_deformation",
    "1d_piezoelectric",
)

_DIMENSION = {k: int(k[0]) for k in KINDS}
_EXPONENT = {k: _DIMENSION[k] - (0 if k.endswith("deformation") else 2) for k in KINDS}

_SERIES_CUT = 0.1


def geometric_factor(dimension, x):
    """G_n(x) with a series branch below x=0.1 to avoid cancellation."""
    x = np.asarray(x, dtype=float)
    if dimension == 1:
        return 2.0 * np.sin(0.5 * x) ** 2
    x2 = x * x
    if dimension == 3:
        series = x2 / 6.0 - x2**2 / 120.0 + x2**3 / 5040.0 - x2**4 / 362880.0
        safe = np.where(x == 0.0, 1.0, x)
        direct = 1.0 - np.sin(safe) / safe
    elif dimension == 2:
        series = x2 / 4.0 - x2**2 / 64.0 + x2**3 / 2304.0 - x2**4 / 147456.0
        direct = 1.0 - bessel_j0(x)
    else:
        raise ValueError(f"dimension must be 1, 2 or 3, got {dimension}")
    return np.where(np.abs(x) < _SERIES_CUT, series, direct)


def geometric_factor_derivative(dimension, x):
    """dG_n/dx, same branching as `geometric_factor`."""
    x = np.asarray(x, dtype=float)
    if dimension == 1:
        return np.sin(x)
    if dimension == 2:
        return bessel_j1(x)
    x2 = x * x
    series = x / 3.0 - x * x2 / 30.0 + x * x2**2 / 840.0 - x * x2**3 / 45360.0
    safe = np.where(x == 0.0, 1.0, x)
    direct = (np.sin(safe) - safe * np.cos(safe)) / safe**2
    return np.where(np.abs(x) < _SERIES_CUT, series, direct)


@dataclass(frozen=True)
class SpectralDensity:
    """One of the six phonon spectral-density families.

    Parameters are the fitted scale ``j0`` (rad/s), the speed of sound
    (m/s), the dot extent ``a`` and centre-to-centre separation ``d`` (m).
    """

    kind: str
    j0: float
    sound_speed: float = 3000.0
    dot_extent: float = 20e-9
    dot_separation: float = 100e-9
    omega_d_convention: str = "angular"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown spectral density kind {self.kind!r}")
        if self.j0 < 0.0:
            raise ValueError("j0 must be nonnegative")
        if self.sound_speed <= 0.0 or self.dot_extent <= 0.0 or self.dot_separation <= 0.0:
            raise ValueError("geometry parameters must be positive")
        if self.dot_separation <= self.dot_extent:
            raise ValueError("dot separation must exceed dot extent")
        if self.omega_d_convention not in ("angular", "plain"):
            raise ValueError("omega_d_convention must be 'angular' or 'plain'")

    @property
    def _factor(self):
        return 2.0 * np.pi if self.omega_d_convention == "angular" else 1.0

    @property
    def omega_d(self):
        return self._factor * self.sound_speed / self.dot_separation

    @property
    def omega_a(self):
        return self._factor * self.sound_speed / self.dot_extent

    @property
    def dimension(self):
        return _DIMENSION[self.kind]

    @property
    def exponent(self):
        return _EXPONENT[self.kind]

    def value(self, omega):
        return self.value_and_derivatives(omega)[0]

    def value_and_derivatives(self, omega):
        """Return (J, dJ/dj0, dJ/domega) at ``omega`` (rad/s, >= 0).

        J is linear in j0, so dJ/dj0 = J/j0 evaluated without the scale.
        The omega = 0 endpoint returns the analytic limits (J = 0; the
        slope vanishes except for the 1D piezoelectric family).
        """
        omega = np.asarray(omega, dtype=float)
        if np.any(omega < 0.0):
            raise ValueError("omega must be nonnegative")
        n, p = self.dimension, self.exponent
        w_d, w_a = self.omega_d, self.omega_a

        u = omega / w_d
        safe_u = np.where(u == 0.0, 1.0, u)
        g = geometric_factor(n, u)
        dg = geometric_factor_derivative(n, u)
        gauss = np.exp(-0.5 * (omega / w_a) ** 2)

        shape = safe_u**p * g * gauss
        dshape = gauss * (
            (p * safe_u ** (p - 1) * g + safe_u**p * dg) / w_d
            - safe_u**p * g * omega / w_a**2
        )
        # analytic omega->0 limits: u^p G_n(u) ~ u^(p+2); p+2 = 1 only for 1d piezo
        zero_slope = 0.5 / w_d if self.kind == "1d_piezoelectric" else 0.0
        shape = np.where(u == 0.0, 0.0, shape)
        dshape = np.where(u == 0.0, zero_slope, dshape)
        return self.j0 * shape, shape, self.j0 * dshape

    def replace_scale(self, j0):
        return SpectralDensity(
            self.kind, j0, self.sound_speed, self.dot_extent,
            self.dot_separation, self.omega_d_convention,
        )
