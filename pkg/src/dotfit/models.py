"""Quantum-dot transport models mapping device parameters to currents.

Two devices are implemented on a three-dimensional charge basis:

* single dot with an orbital excited state, basis |0>, |G>, |E>, where the
  sweep variable is the ground-level energy;
* double dot with lead and phonon dissipators, basis |0>, |L>, |R>, where
  the sweep variable is the detuning between the dot levels.

Every model evaluation assembles the Liouvillian as a real weight vector
contracted against a fixed set of superoperator templates, which keeps the
per-pixel cost at two small matrix products plus one batched linear solve
and gives closed-form parameter derivatives (the weights are elementary
functions of the parameters).  The template assembly agrees with the
generic `qme.build_liouvillian` to machine precision (tested).

Energies are angular frequencies (rad/s); temperatures kelvin; currents
ampere.  The chemical potentials sit symmetrically around zero,
mu_l = +W/2 and mu_r = -W/2 for a bias window W, and for the double dot
the level energies are E_L = mu_bar + eps/2, E_R = mu_bar - eps/2 about the
window midpoint, so eps = 0 aligns the levels and eps = W parks the left
level at the window edge.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import qme
from .constants import ELECTRON_CHARGE, mv_to_rads
from .spectral import SpectralDensity
from .thermal import bose, bose_domega, bose_dT, fermi, fermi_dT

_E = ELECTRON_CHARGE


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class SqdParams:
    """Single-dot operating point (all energies rad/s, temperature K)."""

    e0: float
    delta: float
    mu_l: float
    mu_r: float
    gamma_l: float
    gamma_r: float
    temperature: float

    def __post_init__(self):
        if self.gamma_l <= 0.0 or self.gamma_r <= 0.0:
            raise ValueError("lead rates must be positive")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.delta < 0.0:
            raise ValueError("excited-state splitting must be nonnegative")
        if self.mu_l <= self.mu_r:
            raise ValueError("expected mu_l > mu_r (bias convention)")


@dataclass(frozen=True)
class DqdParams:
    """Double-dot operating point with a phonon environment."""

    epsilon: float
    t_c: float
    mu_l: float
    mu_r: float
    gamma_l: float
    gamma_r: float
    temperature: float
    spectral: SpectralDensity

    def __post_init__(self):
        if self.t_c <= 0.0:
            raise ValueError("interdot coupling must be positive")
        if self.gamma_l <= 0.0 or self.gamma_r <= 0.0:
            raise ValueError("lead rates must be positive")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class PixelCalibration:
    """Affine map between measurement pixels and sweep energy.

    ``anchor_low``/``anchor_high`` are the pixels of the two energy anchors:
    for the single dot, the crossings of the level with mu_l and mu_r; for
    the double dot, the zero-detuning and full-bias-detuning points.
    """

    axis_length: int
    anchor_low: float
    anchor_high: float
    v_bias_mv: float

    def __post_init__(self):
        if not 0 <= self.anchor_low < self.anchor_high <= self.axis_length:
            raise ValueError("anchors must satisfy 0 <= low < high <= axis length")
        if self.v_bias_mv <= 0.0:
            raise ValueError("bias must be positive")

    @property
    def window(self):
        """Bias window e*V/hbar in rad/s."""
        return mv_to_rads(self.v_bias_mv)

    @property
    def mu_l(self):
        return +0.5 * self.window

    @property
    def mu_r(self):
        return -0.5 * self.window

    @property
    def slope(self):
        """Energy step per pixel (rad/s, positive)."""
        return self.window / (self.anchor_high - self.anchor_low)

    def pixels(self):
        return np.arange(self.axis_length, dtype=float)

    def sqd_level(self, pixel):
        """Ground-level energy at a pixel: decreases through the window."""
        return self.mu_l - (np.asarray(pixel, dtype=float) - self.anchor_low) * self.slope

    def sqd_pixel(self, energy):
        return self.anchor_low + (self.mu_l - np.asarray(energy, dtype=float)) / self.slope

    def dqd_detuning(self, pixel):
        """Detuning at a pixel: 0 at anchor_low, bias window at anchor_high."""
        return (np.asarray(pixel, dtype=float) - self.anchor_low) * self.slope

    def dqd_pixel(self, detuning):
        return self.anchor_low + np.asarray(detuning, dtype=float) / self.slope


@dataclass(frozen=True)
class CurrentTrace:
    """A measured or simulated 1D current scan."""

    pixels: np.ndarray
    current: np.ndarray
    sigma: float
    v_bias_mv: float
    model: str

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=float)
        current = np.asarray(self.current, dtype=float)
        if pixels.shape != current.shape:
            raise ValueError("pixels and current must have matching length")
        if self.sigma < 0.0:
            raise ValueError("noise level must be nonnegative")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "current", current)


# ---------------------------------------------------------------------------
# superoperator templates (constant matrices, cached per basis)


def _ket_bra(d, i, j):
    op = np.zeros((d, d), dtype=complex)
    op[i, j] = 1.0
    return op


@lru_cache(maxsize=None)
def _sqd_templates():
    """Rows: E0 and delta Hamiltonian parts, then in/out dissipators for G, E."""
    d = 3
    h_ground = qme.hamiltonian_superop(np.diag([0.0, 1.0, 1.0]))
    h_split = qme.hamiltonian_superop(np.diag([0.0, 0.0, 1.0]))
    rows = [h_ground, h_split]
    for level in (1, 2):
        rows.append(qme.dissipator_superop(_ket_bra(d, level, 0)))
        rows.append(qme.dissipator_superop(_ket_bra(d, 0, level)))
    return np.stack([r.reshape(-1) for r in rows])


# ordered basis of the left/right block used to expand the phonon dissipator
_DQD_BLOCK = ((1, 1), (1, 2), (2, 1), (2, 2))


@lru_cache(maxsize=None)
def _dqd_templates():
    """Rows: detuning and coupling Hamiltonian parts, 4 lead dissipators,
    then the 16 bilinear phonon blocks over the left/right operator basis."""
    d = 3
    sz_half = np.diag([0.0, 0.5, -0.5])
    sx = _ket_bra(d, 1, 2) + _ket_bra(d, 2, 1)
    rows = [qme.hamiltonian_superop(sz_half), qme.hamiltonian_superop(sx)]
    rows.append(qme.dissipator_superop(_ket_bra(d, 1, 0)))   # load left
    rows.append(qme.dissipator_superop(_ket_bra(d, 0, 1)))   # unload left
    rows.append(qme.dissipator_superop(_ket_bra(d, 2, 0)))   # load right
    rows.append(qme.dissipator_superop(_ket_bra(d, 0, 2)))   # unload right
    ops = [_ket_bra(d, i, j) for i, j in _DQD_BLOCK]
    for op_a in ops:
        for op_b in ops:
            rows.append(qme.lindblad_cross_superop(op_a, op_b))
    return np.stack([r.reshape(-1) for r in rows])


def _assemble(weights, templates):
    """Contract real weights (..., K) with complex templates (K, d^4)."""
    flat = weights.reshape(-1, weights.shape[-1])
    out = np.empty((flat.shape[0], templates.shape[1]), dtype=complex)
    out.real = flat @ templates.real
    out.imag = flat @ templates.imag
    d2 = int(np.sqrt(templates.shape[1]))
    return out.reshape(*weights.shape[:-1], d2, d2)


# ---------------------------------------------------------------------------
# single quantum dot


def _sqd_weights(e0, delta, mu_l, mu_r, gamma_l, gamma_r, temperature):
    levels = (e0, e0 + delta)
    cols = [e0, delta]
    for energy in levels:
        f_l = fermi(energy, mu_l, temperature)
        f_r = fermi(energy, mu_r, temperature)
        cols.append(gamma_l * f_l + gamma_r * f_r)
        cols.append(gamma_l * (1.0 - f_l) + gamma_r * (1.0 - f_r))
    return np.stack(np.broadcast_arrays(*cols), axis=-1)


def _sqd_weight_jacobian(e0, delta, mu_l, mu_r, gamma_l, gamma_r, temperature):
    """d(weights)/d(gamma_l, gamma_r, temperature): (..., 3, 6)."""
    zeros = np.zeros(np.broadcast_shapes(
        np.shape(e0), np.shape(delta), np.shape(mu_l), np.shape(mu_r),
        np.shape(gamma_l), np.shape(gamma_r), np.shape(temperature)))
    rows = {name: [zeros, zeros] for name in ("gamma_l", "gamma_r", "temperature")}
    for energy in (e0, e0 + delta):
        f_l = fermi(energy, mu_l, temperature)
        f_r = fermi(energy, mu_r, temperature)
        df_l = fermi_dT(energy, mu_l, temperature)
        df_r = fermi_dT(energy, mu_r, temperature)
        rows["gamma_l"] += [f_l + zeros, (1.0 - f_l) + zeros]
        rows["gamma_r"] += [f_r + zeros, (1.0 - f_r) + zeros]
        rows["temperature"] += [gamma_l * df_l + gamma_r * df_r,
                                -(gamma_l * df_l + gamma_r * df_r)]
    stacked = [np.stack(np.broadcast_arrays(*rows[name]), axis=-1)
               for name in ("gamma_l", "gamma_r", "temperature")]
    return np.stack(stacked, axis=-2)


def sqd_liouvillian_batch(e0, delta, mu_l, mu_r, gamma_l, gamma_r, temperature):
    w = _sqd_weights(e0, delta, mu_l, mu_r, gamma_l, gamma_r, temperature)
    return _assemble(w, _sqd_templates())


def sqd_liouvillian(params: SqdParams):
    """(9, 9) generator for a single operating point."""
    return sqd_liouvillian_batch(
        params.e0, params.delta, params.mu_l, params.mu_r,
        params.gamma_l, params.gamma_r, params.temperature)


def _sqd_current_from_states(states, e0, delta, mu_r, gamma_r, temperature):
    f_g = fermi(e0, mu_r, temperature)
    f_e = fermi(e0 + delta, mu_r, temperature)
    p0 = states[..., 0, 0].real
    pg = states[..., 1, 1].real
    pe = states[..., 2, 2].real
    return _E * gamma_r * ((1.0 - f_g) * pg + (1.0 - f_e) * pe - (f_g + f_e) * p0)


def sqd_current_batch(e0, delta, mu_l, mu_r, gamma_l, gamma_r, temperature,
                      method="lu"):
    """Steady-state current (A), broadcasting over every argument.

    Rows whose solve fails are returned as NaN.
    """
    args = np.broadcast_arrays(
        np.asarray(e0, dtype=float), delta, mu_l, mu_r, gamma_l, gamma_r, temperature)
    shape = args[0].shape
    flat = [a.reshape(-1) for a in args]
    liouvs = sqd_liouvillian_batch(*flat)
    states, _ = qme.steady_state_batch(liouvs, method=method, on_failure="mask")
    current = _sqd_current_from_states(states, flat[0], flat[1], flat[3], flat[5],
                                       flat[6])
    return current.reshape(shape)


def sqd_current(params: SqdParams, method="qr"):
    return float(sqd_current_batch(
        params.e0, params.delta, params.mu_l, params.mu_r,
        params.gamma_l, params.gamma_r, params.temperature, method=method))


def sqd_current_and_gradient(e0, delta, mu_l, mu_r, gamma_l, gamma_r, temperature,
                             method="lu"):
    """Current and its gradient w.r.t. (gamma_l, gamma_r, temperature).

    Combines implicit differentiation of the steady state with the explicit
    parameter dependence of the current observable.
    """
    args = np.broadcast_arrays(
        np.asarray(e0, dtype=float), delta, mu_l, mu_r, gamma_l, gamma_r, temperature)
    shape = args[0].shape
    e0f, deltaf, mulf, murf, glf, grf, tf = [a.reshape(-1) for a in args]

    liouvs = sqd_liouvillian_batch(e0f, deltaf, mulf, murf, glf, grf, tf)
    dweights = _sqd_weight_jacobian(e0f, deltaf, mulf, murf, glf, grf, tf)
    dliouvs = _assemble(dweights, _sqd_templates())
    states, dstates, _ = qme.steady_state_and_derivatives(
        liouvs, dliouvs, method=method, on_failure="mask")

    current = _sqd_current_from_states(states, e0f, deltaf, murf, grf, tf)
    dcurrent = _sqd_current_from_states(dstates, e0f[:, None], deltaf[:, None],
                                        murf[:, None], grf[:, None], tf[:, None])
    # explicit observable dependence: gamma_r and temperature enter the rates
    f_g = fermi(e0f, murf, tf)
    f_e = fermi(e0f + deltaf, murf, tf)
    df_g = fermi_dT(e0f, murf, tf)
    df_e = fermi_dT(e0f + deltaf, murf, tf)
    p0 = states[..., 0, 0].real
    pg = states[..., 1, 1].real
    pe = states[..., 2, 2].real
    dcurrent[:, 1] += _E * ((1.0 - f_g) * pg + (1.0 - f_e) * pe - (f_g + f_e) * p0)
    dcurrent[:, 2] += _E * grf * (-df_g * pg - df_e * pe - (df_g + df_e) * p0)
    return current.reshape(shape), dcurrent.reshape(*shape, 3)


# ---------------------------------------------------------------------------
# double quantum dot


def _dqd_geometry(epsilon, t_c):
    """Eigen-splitting and mixing angle of the two-level block.

    theta = atan2(2 t_c, eps) lies in (0, pi) for t_c > 0, so the upper
    eigenstate localises on the left dot for large positive detuning and on
    the right dot for large negative detuning.
    """
    epsilon = np.asarray(epsilon, dtype=float)
    omega_p = np.sqrt(epsilon * epsilon + 4.0 * np.asarray(t_c, dtype=float) ** 2)
    theta = np.arctan2(2.0 * np.asarray(t_c, dtype=float), epsilon)
    return omega_p, theta


def _phonon_components(theta):
    """Components of the emission/absorption jump operators on the block basis.

    Emission lowers |+> into |->; expanding both operators over
    {|L><L|, |L><R|, |R><L|, |R><R|} gives vectors that are elementary in
    theta (the coefficients are real).
    """
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    down = np.stack(np.broadcast_arrays(
        -0.5 * sin_t, -(0.5 * (1.0 - cos_t)), 0.5 * (1.0 + cos_t), 0.5 * sin_t),
        axis=-1)
    up = np.stack(np.broadcast_arrays(
        -0.5 * sin_t, 0.5 * (1.0 + cos_t), -(0.5 * (1.0 - cos_t)), 0.5 * sin_t),
        axis=-1)
    ddown = np.stack(np.broadcast_arrays(
        -0.5 * cos_t, -0.5 * sin_t, -0.5 * sin_t, 0.5 * cos_t), axis=-1)
    dup = np.stack(np.broadcast_arrays(
        -0.5 * cos_t, -0.5 * sin_t, -0.5 * sin_t, 0.5 * cos_t), axis=-1)
    return down, up, ddown, dup


def _dqd_lead_rates(epsilon, mu_l, mu_r, gamma_l, gamma_r, temperature):
    mu_bar = 0.5 * (mu_l + mu_r)
    e_left = mu_bar + 0.5 * epsilon
    e_right = mu_bar - 0.5 * epsilon
    f_l = fermi(e_left, mu_l, temperature)
    f_r = fermi(e_right, mu_r, temperature)
    return e_left, e_right, f_l, f_r


def _dqd_weights(epsilon, t_c, mu_l, mu_r, gamma_l, gamma_r, temperature,
                 j0, shape_spec: SpectralDensity, with_jacobian=False):
    """Weight vector (..., 22) and, optionally, its (..., 5, 22) jacobian
    w.r.t. (gamma_l, gamma_r, t_c, j0, temperature)."""
    epsilon = np.asarray(epsilon, dtype=float)
    omega_p, theta = _dqd_geometry(epsilon, t_c)
    _, _, f_l, f_r = _dqd_lead_rates(epsilon, mu_l, mu_r, gamma_l, gamma_r,
                                     temperature)

    sin_t = np.sin(theta)
    unit = shape_spec.replace_scale(1.0)
    j_shape, _, dj_shape_dw = unit.value_and_derivatives(omega_p)
    coupling = sin_t * sin_t * j_shape          # gamma(omega_p) / j0
    occupation = bose(omega_p, temperature)
    rate_down = j0 * coupling * (1.0 + occupation)
    rate_up = j0 * coupling * occupation

    down, up, ddown, dup = _phonon_components(theta)
    pair_down = down[..., :, None] * down[..., None, :]
    pair_up = up[..., :, None] * up[..., None, :]
    phonon = (rate_down[..., None, None] * pair_down
              + rate_up[..., None, None] * pair_up)

    lead_cols = [gamma_l * f_l, gamma_l * (1.0 - f_l),
                 gamma_r * f_r, gamma_r * (1.0 - f_r)]
    head = np.stack(np.broadcast_arrays(epsilon, t_c, *lead_cols), axis=-1)
    weights = np.concatenate(
        [head, phonon.reshape(*phonon.shape[:-2], 16)], axis=-1)
    if not with_jacobian:
        return weights

    shape = weights.shape[:-1]
    zeros = np.zeros(shape)
    jac = np.zeros((*shape, 5, 22))

    e_left = 0.5 * (mu_l + mu_r) + 0.5 * epsilon
    e_right = 0.5 * (mu_l + mu_r) - 0.5 * epsilon
    df_l = fermi_dT(e_left, mu_l, temperature)
    df_r = fermi_dT(e_right, mu_r, temperature)

    # lead columns (2..5): d/dgamma_l, d/dgamma_r, d/dT
    jac[..., 0, 2] = f_l + zeros
    jac[..., 0, 3] = (1.0 - f_l) + zeros
    jac[..., 1, 4] = f_r + zeros
    jac[..., 1, 5] = (1.0 - f_r) + zeros
    jac[..., 4, 2] = gamma_l * df_l + zeros
    jac[..., 4, 3] = -gamma_l * df_l + zeros
    jac[..., 4, 4] = gamma_r * df_r + zeros
    jac[..., 4, 5] = -gamma_r * df_r + zeros
    # coupling column (1): d/dt_c
    jac[..., 2, 1] = 1.0

    # phonon blocks: chain rule through omega_p and theta
    dtheta_dtc = 2.0 * epsilon / (omega_p * omega_p)
    domega_dtc = 4.0 * np.asarray(t_c, dtype=float) / omega_p
    docc_dw = bose_domega(omega_p, temperature)
    docc_dT = bose_dT(omega_p, temperature)
    dcoupling_dtc = (2.0 * sin_t * np.cos(theta) * j_shape * dtheta_dtc
                     + sin_t * sin_t * dj_shape_dw * domega_dtc)

    drate_down = {
        "t_c": j0 * (dcoupling_dtc * (1.0 + occupation)
                     + coupling * docc_dw * domega_dtc),
        "j0": coupling * (1.0 + occupation),
        "temperature": j0 * coupling * docc_dT,
    }
    drate_up = {
        "t_c": j0 * (dcoupling_dtc * occupation + coupling * docc_dw * domega_dtc),
        "j0": coupling * occupation,
        "temperature": j0 * coupling * docc_dT,
    }
    dpair_down_dtheta = (ddown[..., :, None] * down[..., None, :]
                         + down[..., :, None] * ddown[..., None, :])
    dpair_up_dtheta = (dup[..., :, None] * up[..., None, :]
                       + up[..., :, None] * dup[..., None, :])

    for idx, name in ((2, "t_c"), (3, "j0"), (4, "temperature")):
        block = (drate_down[name][..., None, None] * pair_down
                 + drate_up[name][..., None, None] * pair_up)
        if name == "t_c":
            block = block + dtheta_dtc[..., None, None] * (
                rate_down[..., None, None] * dpair_down_dtheta
                + rate_up[..., None, None] * dpair_up_dtheta)
        jac[..., idx, 6:] = block.reshape(*shape, 16)
    return weights, jac


def dqd_liouvillian_batch(epsilon, t_c, mu_l, mu_r, gamma_l, gamma_r, temperature,
                          j0, shape_spec: SpectralDensity):
    w = _dqd_weights(epsilon, t_c, mu_l, mu_r, gamma_l, gamma_r, temperature,
                     j0, shape_spec)
    return _assemble(w, _dqd_templates())


def dqd_liouvillian(params: DqdParams):
    """(9, 9) generator for a single operating point."""
    return dqd_liouvillian_batch(
        params.epsilon, params.t_c, params.mu_l, params.mu_r,
        params.gamma_l, params.gamma_r, params.temperature,
        params.spectral.j0, params.spectral)


def _dqd_current_from_states(states, f_r, gamma_r):
    p0 = states[..., 0, 0].real
    pr = states[..., 2, 2].real
    return _E * gamma_r * ((1.0 - f_r) * pr - f_r * p0)


def dqd_current_batch(epsilon, t_c, mu_l, mu_r, gamma_l, gamma_r, temperature,
                      j0, shape_spec: SpectralDensity, method="lu"):
    """Steady-state current (A), broadcasting over every argument."""
    args = np.broadcast_arrays(
        np.asarray(epsilon, dtype=float), t_c, mu_l, mu_r, gamma_l, gamma_r,
        temperature, j0)
    shape = args[0].shape
    flat = [a.reshape(-1) for a in args]
    epsf, tcf, mulf, murf, glf, grf, tf, j0f = flat
    liouvs = dqd_liouvillian_batch(epsf, tcf, mulf, murf, glf, grf, tf, j0f,
                                   shape_spec)
    states, _ = qme.steady_state_batch(liouvs, method=method, on_failure="mask")
    _, _, _, f_r = _dqd_lead_rates(epsf, mulf, murf, glf, grf, tf)
    return _dqd_current_from_states(states, f_r, grf).reshape(shape)


def dqd_current(params: DqdParams, method="qr"):
    return float(dqd_current_batch(
        params.epsilon, params.t_c, params.mu_l, params.mu_r,
        params.gamma_l, params.gamma_r, params.temperature,
        params.spectral.j0, params.spectral, method=method))


def dqd_current_and_gradient(epsilon, t_c, mu_l, mu_r, gamma_l, gamma_r,
                             temperature, j0, shape_spec: SpectralDensity,
                             method="lu"):
    """Current and gradient w.r.t. (gamma_l, gamma_r, t_c, j0, temperature)."""
    args = np.broadcast_arrays(
        np.asarray(epsilon, dtype=float), t_c, mu_l, mu_r, gamma_l, gamma_r,
        temperature, j0)
    shape = args[0].shape
    flat = [a.reshape(-1) for a in args]
    epsf, tcf, mulf, murf, glf, grf, tf, j0f = flat

    weights, jac = _dqd_weights(epsf, tcf, mulf, murf, glf, grf, tf, j0f,
                                shape_spec, with_jacobian=True)
    liouvs = _assemble(weights, _dqd_templates())
    dliouvs = _assemble(jac, _dqd_templates())
    states, dstates, _ = qme.steady_state_and_derivatives(
        liouvs, dliouvs, method=method, on_failure="mask")

    _, _, _, f_r = _dqd_lead_rates(epsf, mulf, murf, glf, grf, tf)
    current = _dqd_current_from_states(states, f_r, grf)
    dcurrent = _dqd_current_from_states(dstates, f_r[:, None], grf[:, None])
    # explicit observable dependence (gamma_r and temperature via f_r)
    e_right = 0.5 * (mulf + murf) - 0.5 * epsf
    df_r = fermi_dT(e_right, murf, tf)
    p0 = states[..., 0, 0].real
    pr = states[..., 2, 2].real
    dcurrent[:, 1] += _E * ((1.0 - f_r) * pr - f_r * p0)
    dcurrent[:, 4] += _E * grf * (-df_r * pr - df_r * p0)
    return current.reshape(shape), dcurrent.reshape(*shape, 5)


# ---------------------------------------------------------------------------
# builders implementing the qme gradient protocol (used by generic checks)


@dataclass(frozen=True)
class SqdBuilder:
    """Maps parameter rows (e0, gamma_l, gamma_r, temperature) to generators."""

    delta: float
    mu_l: float
    mu_r: float
    diff_indices = (1, 2, 3)

    def liouvillian(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        return sqd_liouvillian_batch(params[:, 0], self.delta, self.mu_l,
                                     self.mu_r, params[:, 1], params[:, 2],
                                     params[:, 3])

    def liouvillian_and_jacobian(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        e0, gl, gr, t = (params[:, i] for i in range(4))
        liouvs = self.liouvillian(params)
        dw = _sqd_weight_jacobian(e0, self.delta, self.mu_l, self.mu_r, gl, gr, t)
        return liouvs, _assemble(dw, _sqd_templates())

    def current_and_gradient(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        return sqd_current_and_gradient(params[:, 0], self.delta, self.mu_l,
                                        self.mu_r, params[:, 1], params[:, 2],
                                        params[:, 3])


@dataclass(frozen=True)
class DqdBuilder:
    """Maps rows (epsilon, gamma_l, gamma_r, t_c, j0, temperature) to generators."""

    mu_l: float
    mu_r: float
    shape_spec: SpectralDensity
    diff_indices = (1, 2, 3, 4, 5)

    def _split(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        eps, gl, gr, tc, j0, t = (params[:, i] for i in range(6))
        return eps, tc, self.mu_l, self.mu_r, gl, gr, t, j0

    def liouvillian(self, params):
        eps, tc, mul, mur, gl, gr, t, j0 = self._split(params)
        return dqd_liouvillian_batch(eps, tc, mul, mur, gl, gr, t, j0,
                                     self.shape_spec)

    def liouvillian_and_jacobian(self, params):
        eps, tc, mul, mur, gl, gr, t, j0 = self._split(params)
        weights, jac = _dqd_weights(eps, tc, mul, mur, gl, gr, t, j0,
                                    self.shape_spec, with_jacobian=True)
        # builder exposes gradient columns in the order (gl, gr, tc, j0, T)
        return _assemble(weights, _dqd_templates()), _assemble(jac, _dqd_templates())

    def current_and_gradient(self, params):
        eps, tc, mul, mur, gl, gr, t, j0 = self._split(params)
        return dqd_current_and_gradient(eps, tc, mul, mur, gl, gr, t, j0,
                                        self.shape_spec)


# ---------------------------------------------------------------------------
# analytic single-level oracle (closed forms with gradients)


def analytic_two_level_current(level, mu_l, mu_r, gamma_l, gamma_r, temperature):
    """Closed-form sequential-transport current through one level.

    Returns (I, dI/dgamma_l, dI/dgamma_r, dI/dT).  The temperature derivative
    of the Fermi function carries the conventional 1/4 prefactor, which is
    what central differences of the current formula require.
    """
    f_l, df_l = fermi(level, mu_l, temperature), fermi_dT(level, mu_l, temperature)
    f_r, df_r = fermi(level, mu_r, temperature), fermi_dT(level, mu_r, temperature)
    total = gamma_l + gamma_r
    diff = f_l - f_r
    current = _E * gamma_l * gamma_r * diff / total
    d_gl = _E * gamma_r**2 * diff / total**2
    d_gr = _E * gamma_l**2 * diff / total**2
    d_t = _E * gamma_l * gamma_r * (df_l - df_r) / total
    return current, d_gl, d_gr, d_t


@dataclass(frozen=True)
class TwoLevelBuilder:
    """Single-level dot (basis |0>, |1>) for solver-vs-oracle comparisons.

    Parameter rows are (level, gamma_l, gamma_r, temperature).
    """

    mu_l: float
    mu_r: float
    diff_indices = (1, 2, 3)

    @staticmethod
    @lru_cache(maxsize=None)
    def _templates():
        h_row = qme.hamiltonian_superop(np.diag([0.0, 1.0]))
        load = qme.dissipator_superop(np.array([[0, 0], [1, 0]], dtype=complex))
        unload = qme.dissipator_superop(np.array([[0, 1], [0, 0]], dtype=complex))
        return np.stack([h_row.reshape(-1), load.reshape(-1), unload.reshape(-1)])

    def _rates(self, params):
        level, gl, gr, t = (params[:, i] for i in range(4))
        f_l = fermi(level, self.mu_l, t)
        f_r = fermi(level, self.mu_r, t)
        return level, gl, gr, t, f_l, f_r

    def liouvillian(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        level, gl, gr, t, f_l, f_r = self._rates(params)
        w = np.stack([level, gl * f_l + gr * f_r,
                      gl * (1 - f_l) + gr * (1 - f_r)], axis=-1)
        return _assemble(w, self._templates())

    def liouvillian_and_jacobian(self, params):
        params = np.atleast_2d(np.asarray(params, dtype=float))
        level, gl, gr, t, f_l, f_r = self._rates(params)
        df_l = fermi_dT(level, self.mu_l, t)
        df_r = fermi_dT(level, self.mu_r, t)
        zeros = np.zeros_like(level)
        jac = np.stack([
            np.stack([zeros, f_l, 1 - f_l], axis=-1),
            np.stack([zeros, f_r, 1 - f_r], axis=-1),
            np.stack([zeros, gl * df_l + gr * df_r,
                      -(gl * df_l + gr * df_r)], axis=-1),
        ], axis=-2)
        return self.liouvillian(params), _assemble(jac, self._templates())

    def current_and_gradient(self, params):
        """Solver-route current via implicit differentiation (for the oracle test)."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        level, gl, gr, t, f_l, f_r = self._rates(params)
        liouvs, dliouvs = self.liouvillian_and_jacobian(params)
        states, dstates = qme.steady_state_and_derivatives(liouvs, dliouvs)
        df_r = fermi_dT(level, self.mu_r, t)
        occupied = states[:, 1, 1].real
        empty = states[:, 0, 0].real
        current = _E * gr * ((1 - f_r) * occupied - f_r * empty)
        dcurrent = _E * gr[:, None] * ((1 - f_r[:, None]) * dstates[:, :, 1, 1].real
                                       - f_r[:, None] * dstates[:, :, 0, 0].real)
        dcurrent[:, 1] += _E * ((1 - f_r) * occupied - f_r * empty)
        dcurrent[:, 2] += _E * gr * (-df_r * occupied - df_r * empty)
        return current, dcurrent


# ---------------------------------------------------------------------------
# trace simulation


def sqd_trace_model(cal: PixelCalibration, gamma_l, gamma_r, temperature, delta,
                    pixels=None, method="lu"):
    """Noiseless single-dot current over the pixel grid (broadcastable params)."""
    pixels = cal.pixels() if pixels is None else np.asarray(pixels, dtype=float)
    e0 = cal.sqd_level(pixels)
    return sqd_current_batch(e0, delta, cal.mu_l, cal.mu_r, gamma_l, gamma_r,
                             temperature, method=method)


def dqd_trace_model(cal: PixelCalibration, gamma_l, gamma_r, t_c, temperature,
                    j0, shape_spec: SpectralDensity, pixels=None, method="lu"):
    """Noiseless double-dot current over the pixel grid (broadcastable params)."""
    pixels = cal.pixels() if pixels is None else np.asarray(pixels, dtype=float)
    eps = cal.dqd_detuning(pixels)
    return dqd_current_batch(eps, t_c, cal.mu_l, cal.mu_r, gamma_l, gamma_r,
                             temperature, j0, shape_spec, method=method)


def simulate_trace(model, cal: PixelCalibration, params, sigma, seed=0):
    """Simulated trace: model curve plus i.i.d. Gaussian noise of std ``sigma``.

    ``model`` is "sqd" or "dqd"; ``params`` is the matching parameter dict in
    internal units (see `sqd_trace_model` / `dqd_trace_model` signatures).
    ``sigma = 0`` returns the exact curve regardless of seed.
    """
    if sigma < 0.0:
        raise ValueError("noise level must be nonnegative")
    if model == "sqd":
        clean = sqd_trace_model(cal, params["gamma_l"], params["gamma_r"],
                                params["temperature"], params["delta"])
    elif model == "dqd":
        clean = dqd_trace_model(cal, params["gamma_l"], params["gamma_r"],
                                params["t_c"], params["temperature"],
                                params["j0"], params["spectral"])
    else:
        raise ValueError(f"unknown model {model!r}")
    noise = 0.0
    if sigma > 0.0:
        noise = np.random.default_rng(seed).normal(0.0, sigma, size=clean.shape)
    return CurrentTrace(pixels=cal.pixels(), current=clean + noise, sigma=sigma,
                        v_bias_mv=cal.v_bias_mv, model=model)
