"""Physical constants and unit conversions.

Internal convention: hbar = 1, so every energy is stored as an angular
frequency in rad/s.  Conversions to and from laboratory units happen at the
boundary (config parsing, result reporting) and nowhere else.

Conversion rules for quoted device values:

* lead tunnel rates (MHz) are plain rates, 1 MHz -> 1e6 s^-1 (no 2*pi), which
  is what makes ``I = e*G_L*G_R/(G_L+G_R)`` come out right on the plateau;
* coherent couplings and spectral-density scales (GHz) are h-frequencies,
  1 GHz -> 2*pi*1e9 rad/s;
* voltages (mV) and level splittings (meV) convert through e/hbar;
* temperatures stay in kelvin, k_B/hbar is applied inside the occupation
  functions.
"""

import math

# k_B / hbar in rad s^-1 K^-1 (CODATA 1.380649e-23 / 1.054571817e-34)
KB_OVER_HBAR = 1.30920e11

# e / hbar in rad s^-1 per mV (CODATA 1.602176634e-19 / 1.054571817e-34 * 1e-3)
RADS_PER_MV = 1.51927e12

# electron charge in coulomb
ELECTRON_CHARGE = 1.602177e-19

# 1 nanosecond in seconds
NS = 1e-9


def mv_to_rads(v_mv):
    """Voltage (or meV energy) to angular frequency."""
    return v_mv * RADS_PER_MV


def rads_to_mv(omega):
    return omega / RADS_PER_MV


def mhz_rate(f_mhz):
    """Tunnel rate quoted in MHz to s^-1."""
    return f_mhz * 1e6


def rate_to_mhz(rate):
    return rate * 1e-6


def ghz_angular(f_ghz):
    """Coherent coupling or spectral scale quoted in GHz to rad/s."""
    return 2.0 * math.pi * f_ghz * 1e9


def angular_to_ghz(omega):
    return omega / (2.0 * math.pi * 1e9)


def mk_to_kelvin(t_mk):
    return t_mk * 1e-3


def kelvin_to_mk(t_k):
    return t_k * 1e3


def fa_to_ampere(i_fa):
    return i_fa * 1e-15
