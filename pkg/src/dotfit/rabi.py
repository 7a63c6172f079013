"""Rabi pulse sequences on the double dot operated as a charge qubit.

The sequence initialises the charge on the left dot at a rest detuning that
keeps its level below both lead chemical potentials, pulses the detuning by
a step ``detuning_step`` for a variable duration, then returns to rest and
integrates the current over a measurement window.  The pulse detuning axis
of the chevron map is Delta_p = |detuning_step| - |rest_detuning|, so
Delta_p = 0 brings the dots into resonance during the pulse.
"""

from dataclasses import dataclass

import numpy as np

from . import qme
from .constants import ELECTRON_CHARGE
from .models import dqd_liouvillian_batch, _dqd_lead_rates
from .spectral import SpectralDensity


@dataclass(frozen=True)
class PulseSequence:
    """Init/pulse/measure durations (s) and the detuning levels (rad/s)."""

    tau_init: float
    tau_pulse: float
    tau_measure: float
    rest_detuning: float
    detuning_step: float

    def __post_init__(self):
        if self.tau_init <= 0.0 or self.tau_measure <= 0.0 or self.tau_pulse < 0.0:
            raise ValueError("durations must be positive (pulse may be zero)")

    @property
    def pulse_detuning(self):
        return self.rest_detuning + self.detuning_step

    @property
    def segments(self):
        segs = [(self.tau_init, self.rest_detuning)]
        if self.tau_pulse > 0.0:
            segs.append((self.tau_pulse, self.pulse_detuning))
        segs.append((self.tau_measure, self.rest_detuning))
        return tuple(segs)


@dataclass
class ChevronMap:
    tau_pulse: np.ndarray          # (n_tau,) seconds
    delta_p: np.ndarray            # (n_dp,) rad/s
    mean_current: np.ndarray       # (n_tau, n_dp) ampere
    right_population: np.ndarray   # (n_tau, n_dp) at the end of the pulse

    def contrast(self, column):
        """Peak-to-peak amplitude of the oscillation at one pulse detuning."""
        col = self.mean_current[:, column]
        return float(col.max() - col.min())


def _left_state():
    rho = np.zeros((3, 3), dtype=complex)
    rho[1, 1] = 1.0
    return rho


def chevron_map(gamma_l, gamma_r, t_c, temperature, spectral: SpectralDensity,
                mu_l, mu_r, rest_detuning, delta_p, tau_pulse_max, n_tau,
                tau_init=1e-9, tau_measure=1e-9, dt=5e-12, measure_chunk=12):
    """Mean measured current over a (pulse duration, pulse detuning) grid.

    The initialisation segment is shared by every grid point; the pulse
    segment is evolved once per detuning with states captured at each pulse
    duration on the grid (grid times snap to multiples of ``dt``).
    """
    delta_p = np.asarray(delta_p, dtype=float)
    n_dp = delta_p.size
    device = dict(t_c=t_c, mu_l=mu_l, mu_r=mu_r, gamma_l=gamma_l,
                  gamma_r=gamma_r, temperature=temperature,
                  j0=spectral.j0, shape_spec=spectral)

    def liouv(eps):
        return dqd_liouvillian_batch(
            np.asarray(eps, dtype=float), device["t_c"], device["mu_l"],
            device["mu_r"], device["gamma_l"], device["gamma_r"],
            device["temperature"], device["j0"], device["shape_spec"])

    liouv_rest = liouv(rest_detuning)

    # shared initialisation from |L><L| at rest detuning
    init = qme.evolve_rk4(liouv_rest, _left_state(), t_end=tau_init, dt=dt,
                          store_every=10**9)
    state0 = init.states[-1, 0]

    # pulse segment per detuning, capturing the tau_p grid along the way
    steps_per_point = max(1, int(round(tau_pulse_max / max(n_tau - 1, 1) / dt)))
    tau_grid = np.arange(n_tau) * steps_per_point * dt
    pulse_eps = rest_detuning + np.abs(rest_detuning) + delta_p
    liouv_pulse = liouv(pulse_eps)
    rho0 = np.broadcast_to(state0, (n_dp, 3, 3))
    if n_tau > 1:
        traj = qme.evolve_rk4(liouv_pulse, rho0, t_end=tau_grid[-1], dt=dt,
                              store_every=steps_per_point)
        pulse_states = traj.states          # (n_tau, n_dp, 3, 3)
    else:
        pulse_states = rho0[None]
    right_pop = pulse_states[:, :, 2, 2].real.copy()

    # measurement: all grid points evolve under the rest generator
    _, _, _, f_r = _dqd_lead_rates(np.asarray(rest_detuning, float), mu_l, mu_r,
                                   gamma_l, gamma_r, temperature)
    w_in = float(gamma_r * f_r)
    w_out = float(gamma_r * (1.0 - f_r))

    flat = pulse_states.reshape(-1, 3, 3)
    means = np.empty(flat.shape[0])
    chunk = max(1, measure_chunk) * max(n_dp, 1)
    for lo in range(0, flat.shape[0], chunk):
        traj = qme.evolve_rk4(liouv_rest, flat[lo:lo + chunk],
                              t_end=tau_measure, dt=dt)
        currents = ELECTRON_CHARGE * (w_out * traj.states[:, :, 2, 2].real
                                      - w_in * traj.states[:, :, 0, 0].real)
        means[lo:lo + chunk] = np.trapezoid(currents, traj.times, axis=0) / tau_measure
    return ChevronMap(tau_pulse=tau_grid, delta_p=delta_p,
                      mean_current=means.reshape(n_tau, n_dp),
                      right_population=right_pop)
