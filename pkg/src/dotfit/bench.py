"""Wall-time scaling studies for the steady-state solver.

Measures how the direct solve amortises over batch size, how it compares
with integrating to the steady state, how the cost grows with Hilbert-space
dimension, and how long the fitting stages take.  Absolute times are
hardware-bound; the interesting outputs are trends and ratios.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import qme
from .constants import fa_to_ampere, mk_to_kelvin, mv_to_rads
from .models import PixelCalibration, SqdBuilder, simulate_trace, sqd_liouvillian_batch
from .thermal import fermi


@dataclass
class BenchReport:
    batch_sizes: list
    output_s: list                  # direct steady-state currents
    with_gradient_s: list           # currents plus parameter gradients
    gradient_only_s: list
    rk4_batch_size: int
    rk4_output_s: float
    rk4_direct_s: float
    hilbert_dims: list
    hilbert_output_s: list
    hilbert_batch_size: int
    hilbert_slope: float
    grid_search_s: float = float("nan")
    final_descent_s: float = float("nan")

    def as_dict(self):
        return {
            "batch_sizes": list(self.batch_sizes),
            "output_s": list(self.output_s),
            "with_gradient_s": list(self.with_gradient_s),
            "gradient_only_s": list(self.gradient_only_s),
            "per_output_s": [t / n for t, n in zip(self.output_s, self.batch_sizes)],
            "rk4_batch_size": self.rk4_batch_size,
            "rk4_output_s": self.rk4_output_s,
            "rk4_direct_s": self.rk4_direct_s,
            "rk4_over_direct": self.rk4_output_s / self.rk4_direct_s,
            "hilbert_dims": list(self.hilbert_dims),
            "hilbert_output_s": list(self.hilbert_output_s),
            "hilbert_batch_size": self.hilbert_batch_size,
            "hilbert_slope": self.hilbert_slope,
            "grid_search_s": self.grid_search_s,
            "final_descent_s": self.final_descent_s,
        }


def _median_time(fn, repeats):
    fn()                                    # warmup
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def _sqd_batch_params(n, seed=0):
    rng = np.random.default_rng(seed)
    window = mv_to_rads(0.109)
    e0 = rng.uniform(-0.5 * window, 0.5 * window, size=n)
    return e0, window


def _time_sqd_batches(batch_sizes, repeats):
    output, with_grad, grad_only = [], [], []
    builder = SqdBuilder(delta=mv_to_rads(0.084), mu_l=0.5 * mv_to_rads(0.109),
                         mu_r=-0.5 * mv_to_rads(0.109))
    for n in batch_sizes:
        e0, _ = _sqd_batch_params(n)
        params = np.column_stack([e0, np.full(n, 18.1e6), np.full(n, 183.1e6),
                                  np.full(n, mk_to_kelvin(55.9))])
        t_out = _median_time(lambda: _current_only(builder, params), repeats)
        t_all = _median_time(lambda: builder.current_and_gradient(params), repeats)
        output.append(t_out)
        with_grad.append(t_all)
        grad_only.append(max(t_all - t_out, 0.0))
    return output, with_grad, grad_only


def _current_only(builder, params):
    liouvs = builder.liouvillian(params)
    states, _ = qme.steady_state_batch(liouvs, on_failure="mask")
    return states[:, 2, 2].real


def _time_rk4_comparison(batch_size, steps, repeats):
    """Direct solve vs RK4 integration to the steady state on the 3x3 model."""
    e0, _ = _sqd_batch_params(batch_size, seed=1)
    liouvs = sqd_liouvillian_batch(e0, mv_to_rads(0.084), 0.5 * mv_to_rads(0.109),
                                   -0.5 * mv_to_rads(0.109), 18.1e6, 183.1e6,
                                   mk_to_kelvin(55.9))
    rho0 = np.zeros((batch_size, 3, 3), dtype=complex)
    rho0[:, 1, 1] = 1.0
    t_end = 10e-9
    dt = t_end / steps

    def rk4():
        qme.evolve_rk4(liouvs, rho0, t_end=t_end, dt=dt, store_every=steps)

    def direct():
        qme.steady_state_batch(liouvs, on_failure="mask")

    return _median_time(rk4, repeats), _median_time(direct, repeats)


def _fan_liouvillians(dim, batch_size):
    """A dim-level generator with a unique steady state: levels 1..dim-1 each
    exchange charge with level 0 at Fermi-weighted rates."""
    window = mv_to_rads(0.109)
    mu_l, mu_r = 0.5 * window, -0.5 * window
    temperature = mk_to_kelvin(100.0)
    rng = np.random.default_rng(dim)
    energies = np.linspace(-0.4 * window, 0.4 * window, max(dim - 1, 1))
    h = np.diag(np.concatenate([[0.0], energies])).astype(complex)
    terms = []
    for j in range(1, dim):
        f_l = float(fermi(energies[j - 1], mu_l, temperature))
        f_r = float(fermi(energies[j - 1], mu_r, temperature))
        up = np.zeros((dim, dim), dtype=complex)
        up[j, 0] = 1.0
        down = np.zeros((dim, dim), dtype=complex)
        down[0, j] = 1.0
        terms.append(qme.JumpTerm(18.1e6 * f_l + 183.1e6 * f_r, up))
        terms.append(qme.JumpTerm(18.1e6 * (1 - f_l) + 183.1e6 * (1 - f_r), down))
    liouv = qme.build_liouvillian(h, terms)
    scale = 1.0 + 1e-4 * rng.random(batch_size)   # distinct rows, same structure
    return liouv[None, :, :] * scale[:, None, None]


def _time_hilbert_scaling(dims, batch_size, repeats):
    times = []
    for dim in dims:
        liouvs = _fan_liouvillians(dim, batch_size)
        times.append(_median_time(
            lambda L=liouvs: qme.steady_state_batch(L, on_failure="mask"), repeats))
    slope = float(np.polyfit(np.log(np.asarray(dims, float)),
                             np.log(np.asarray(times, float)), 1)[0])
    return times, slope


def _time_pipeline(repeats):
    """Grid-search and final-descent wall times on the reference fit scenario."""
    from . import fitting

    cal = PixelCalibration(100, 15.4, 96.6, 0.109)
    params = {"gamma_l": 18.1e6, "gamma_r": 183.1e6,
              "temperature": mk_to_kelvin(55.9), "delta": mv_to_rads(0.084)}
    sigma = fa_to_ampere(100.0)
    trace = simulate_trace("sqd", cal, params, sigma, seed=0)
    problem = fitting.make_problem(trace)
    config = fitting.FitConfig(sigma=sigma)
    nd = np.array([15.4, 96.6, mv_to_rads(0.084)])

    t_grid = _median_time(lambda: fitting.grid_search(problem, nd, config),
                          repeats)
    grid = fitting.grid_search(problem, nd, config)
    loss_fn = problem.loss_and_grad(nd, sigma)

    def descent():
        fitting.adam_descent(loss_fn, grid.point, config.final_descent_steps,
                             config.adam, bounds=problem.internal_bounds())

    return t_grid, _median_time(descent, max(1, repeats // 2))


def run_benchmarks(batch_sizes=(1, 10, 100, 1000), hilbert_dims=tuple(range(2, 17)),
                   rk4_batch_size=100, rk4_steps=1000, repeats=5,
                   include_pipeline=True):
    output, with_grad, grad_only = _time_sqd_batches(batch_sizes, repeats)
    rk4_s, direct_s = _time_rk4_comparison(rk4_batch_size, rk4_steps, repeats)
    hilbert_s, slope = _time_hilbert_scaling(hilbert_dims, 100, repeats)
    report = BenchReport(
        batch_sizes=list(batch_sizes), output_s=output,
        with_gradient_s=with_grad, gradient_only_s=grad_only,
        rk4_batch_size=rk4_batch_size, rk4_output_s=rk4_s, rk4_direct_s=direct_s,
        hilbert_dims=list(hilbert_dims), hilbert_output_s=hilbert_s,
        hilbert_batch_size=100, hilbert_slope=slope)
    if include_pipeline:
        report.grid_search_s, report.final_descent_s = _time_pipeline(max(1, repeats // 2))
    return report
