"""Hamiltonian Monte Carlo over the differentiable parameters.

A plain leapfrog HMC with identity mass matrix on the transformed (log)
coordinates.  The step size is tuned toward a target acceptance rate by
dual averaging during warmup and then frozen; the chain is seeded at the
MAP estimate to keep burn-in short.  Proposals whose energy error exceeds
the divergence threshold are rejected and counted.
"""

import math
from dataclasses import dataclass

import numpy as np

from .fitting import HmcConfig


@dataclass
class PosteriorSamples:
    """Posterior draws in natural units, with chain diagnostics."""

    names: tuple
    samples: np.ndarray          # (n_samples, n_params)
    acceptance_rate: float
    n_divergent: int
    step_size: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError("acceptance rate must lie in [0, 1]")

    @property
    def means(self):
        return self.samples.mean(axis=0)

    @property
    def stds(self):
        return self.samples.std(axis=0, ddof=1)

    def summary(self):
        return {name: (float(m), float(s))
                for name, m, s in zip(self.names, self.means, self.stds)}


def _leapfrog(log_prob_and_grad, position, momentum, step_size, n_steps):
    """Leapfrog integration of the Hamiltonian flow; returns the endpoint."""
    logp, grad = log_prob_and_grad(position)
    momentum = momentum + 0.5 * step_size * grad
    for i in range(n_steps):
        position = position + step_size * momentum
        logp, grad = log_prob_and_grad(position)
        if not np.isfinite(logp):
            return position, momentum, -np.inf
        if i < n_steps - 1:
            momentum = momentum + step_size * grad
    momentum = momentum + 0.5 * step_size * grad
    return position, momentum, logp


def hmc_chain(log_prob_and_grad, start, config: HmcConfig, seed):
    """Run warmup + sampling; returns (samples, acceptance, n_divergent, eps).

    ``log_prob_and_grad(x) -> (float, array)`` evaluates the log posterior
    on the sampling coordinates.  Results are deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    position = np.asarray(start, dtype=float).copy()
    logp, _ = log_prob_and_grad(position)
    if not np.isfinite(logp):
        raise ValueError("chain must start inside the prior support")

    # dual averaging state (Hoffman & Gelman defaults)
    eps = config.initial_step_size
    mu = math.log(10.0 * eps)
    log_eps_bar = 0.0
    h_bar = 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    samples = np.empty((config.n_samples, position.size))
    n_accept = 0
    n_divergent = 0
    total = config.warmup + config.n_samples

    for it in range(total):
        warming = it < config.warmup
        step = eps if warming else math.exp(log_eps_bar)
        momentum = rng.normal(size=position.size)
        h0 = -logp + 0.5 * float(momentum @ momentum)
        prop_q, prop_p, prop_logp = _leapfrog(log_prob_and_grad, position,
                                              momentum, step, config.leapfrog_steps)
        if np.isfinite(prop_logp):
            h1 = -prop_logp + 0.5 * float(prop_p @ prop_p)
            energy_error = h1 - h0
        else:
            energy_error = np.inf
        if energy_error > config.divergence_energy:
            if not warming:       # warmup explores unstable step sizes by design
                n_divergent += 1
            alpha = 0.0
        else:
            alpha = min(1.0, math.exp(min(0.0, -energy_error)))
        if rng.uniform() < alpha:
            position, logp = prop_q, prop_logp
            if not warming:
                n_accept += 1
        if warming:
            t = it + 1
            h_bar = (1.0 - 1.0 / (t + t0)) * h_bar + \
                (config.target_acceptance - alpha) / (t + t0)
            log_eps = mu - math.sqrt(t) / gamma * h_bar
            weight = t ** (-kappa)
            log_eps_bar = weight * log_eps + (1.0 - weight) * log_eps_bar
            eps = math.exp(log_eps)
        else:
            samples[it - config.warmup] = position

    return samples, n_accept / config.n_samples, n_divergent, math.exp(log_eps_bar)


def sample_posterior(problem, nd_values, map_internal, config: HmcConfig, sigma,
                     seed):
    """HMC posterior over a trace problem's differentiable parameters.

    Samples on the transformed coordinates at fixed non-differentiable
    values, seeded at the MAP point, and returns natural-unit draws.
    """
    target = problem.log_posterior_and_grad(nd_values, sigma)
    raw, acceptance, n_div, eps = hmc_chain(target, np.asarray(map_internal),
                                            config, seed)
    natural = np.column_stack([
        np.asarray(spec.from_internal(raw[:, i]))
        for i, spec in enumerate(problem.diff_specs)])
    return PosteriorSamples(names=tuple(problem.diff_names), samples=natural,
                            acceptance_rate=acceptance, n_divergent=n_div,
                            step_size=eps, seed=seed)
