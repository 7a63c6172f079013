"""Lead and bath occupation functions with analytic derivatives.

All energies are angular frequencies (rad/s), temperatures are kelvin.
Every function broadcasts over numpy arrays and is overflow-safe for
arbitrarily large reduced energies.
"""

import numpy as np

from .constants import KB_OVER_HBAR


def fermi(energy, mu, temperature):
    """Fermi-Dirac occupation of a lead at chemical potential ``mu``.

    Uses f = (1 - tanh(x/2))/2 with x = (energy - mu)/(k_B T), which
    saturates to exactly 0.0 / 1.0 instead of overflowing.
    """
    temperature = np.asarray(temperature, dtype=float)
    if np.any(temperature <= 0.0):
        raise ValueError("temperature must be positive")
    x = (np.asarray(energy, dtype=float) - mu) / (KB_OVER_HBAR * temperature)
    return 0.5 * (1.0 - np.tanh(0.5 * x))


def fermi_dT(energy, mu, temperature):
    """Temperature derivative of `fermi` (per kelvin).

    df/dT = x/(4T) * sech^2(x/2); the sech^2 is evaluated through
    exp(-|x|) so it underflows gracefully far from the step.
    """
    temperature = np.asarray(temperature, dtype=float)
    if np.any(temperature <= 0.0):
        raise ValueError("temperature must be positive")
    x = (np.asarray(energy, dtype=float) - mu) / (KB_OVER_HBAR * temperature)
    t = np.exp(-np.abs(x))
    sech2_half = 4.0 * t / (1.0 + t) ** 2
    return x * sech2_half / (4.0 * temperature)


def fermi_with_dT(energy, mu, temperature):
    """Occupation and its temperature derivative in one call."""
    return fermi(energy, mu, temperature), fermi_dT(energy, mu, temperature)


def _check_bose_args(omega, temperature):
    if np.any(np.asarray(omega) <= 0.0):
        raise ValueError("omega must be positive")
    if np.any(np.asarray(temperature) <= 0.0):
        raise ValueError("temperature must be positive")


def bose(omega, temperature):
    """Bose-Einstein occupation n = 1/(exp(omega/k_B T) - 1), omega > 0."""
    _check_bose_args(omega, temperature)
    z = np.asarray(omega, dtype=float) / (KB_OVER_HBAR * temperature)
    # exp(-z)/(1 - exp(-z)) is accurate for both small and large z
    t = np.exp(-z)
    return t / (-np.expm1(-z))


def bose_dT(omega, temperature):
    """Temperature derivative of `bose` (per kelvin)."""
    _check_bose_args(omega, temperature)
    temperature = np.asarray(temperature, dtype=float)
    z = np.asarray(omega, dtype=float) / (KB_OVER_HBAR * temperature)
    t = np.exp(-z)
    return (z / temperature) * t / (-np.expm1(-z)) ** 2


def bose_domega(omega, temperature):
    """Frequency derivative of `bose` (per rad/s)."""
    _check_bose_args(omega, temperature)
    z = np.asarray(omega, dtype=float) / (KB_OVER_HBAR * temperature)
    t = np.exp(-z)
    return -t / (-np.expm1(-z)) ** 2 / (KB_OVER_HBAR * temperature)
