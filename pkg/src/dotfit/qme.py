"""Liouvillian construction, steady states, gradients and time evolution.

Density matrices are plain complex128 numpy arrays of shape (d, d);
superoperators are (d^2, d^2) arrays acting on column-stacked vec(rho),
so vec(A rho B) = kron(B.T, A) @ vec(rho).  Batched variants take a
leading batch axis and evaluate every row independently; the batched code
path is identical to the per-row path, so results are bitwise equal and
row-order invariant.

Steady states solve rho_dot = 0 with the unit-trace constraint.  Two
mathematically equivalent routes are provided:

* ``method="qr"``: dense QR least squares on the (d^2+1, d^2) system made
  of the row-scaled Liouvillian stacked with the trace row (the reference
  route);
* ``method="lu"``: the trace row replaces the last diagonal row of the
  Liouvillian (which is linearly dependent through trace preservation) and
  the square system is LU-solved.  This is ~3x faster on large batches and
  is the default for the fitting hot loops.

Both reject systems whose steady state is not unique.
"""

from dataclasses import dataclass, field

import numpy as np

_RESIDUAL_REJECT = 1e-8     # reject solve when ||L x||_inf exceeds this * ||L||_max
_RANK_RTOL = 1e-12          # relative R-diagonal / singular-value cutoff
_TRACE_DRIFT_LIMIT = 1e-4   # RK4 aborts beyond this |tr(rho) - 1|


class QmeError(Exception):
    """Base class for solver errors."""


class DegenerateSteadyStateError(QmeError):
    """The Liouvillian null space is not one-dimensional (or the solve failed)."""

    def __init__(self, message, condition=None, row=None):
        self.condition = condition
        self.row = row
        prefix = f"batch row {row}: " if row is not None else ""
        cond = f" (condition estimate {condition:.3e})" if condition is not None else ""
        super().__init__(f"{prefix}{message}{cond}")


class BatchSolveError(QmeError):
    """One or more rows of a batched solve failed; successful rows are kept."""

    def __init__(self, failures, states):
        self.failures = failures          # list of (row index, message)
        self.states = states              # (n, d, d) with NaN rows where failed
        rows = ", ".join(str(r) for r, _ in failures[:8])
        super().__init__(f"steady-state solve failed for rows [{rows}]"
                         f"{'...' if len(failures) > 8 else ''}: {failures[0][1]}")


class TraceDriftError(QmeError):
    """RK4 trace drift exceeded the safety limit (step size too large)."""

    def __init__(self, time, drift):
        self.time = time
        self.drift = drift
        super().__init__(f"trace drifted by {drift:.3e} at t = {time:.3e} s; "
                         "step size too large")


class InvalidDensityMatrixError(QmeError):
    pass


@dataclass(frozen=True)
class JumpTerm:
    """A dissipation channel: rate (s^-1, >= 0) and jump operator (d, d)."""

    rate: float
    operator: np.ndarray

    def __post_init__(self):
        if self.rate < 0.0:
            raise ValueError(f"jump rate must be nonnegative, got {self.rate}")
        op = np.asarray(self.operator, dtype=complex)
        if op.ndim != 2 or op.shape[0] != op.shape[1]:
            raise ValueError(f"jump operator must be square, got shape {op.shape}")
        object.__setattr__(self, "operator", op)


def vectorize(rho):
    """Column-stack a (d, d) matrix into a length d^2 vector."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {rho.shape}")
    return rho.reshape(-1, order="F")


def unvectorize(vec):
    """Inverse of `vectorize`."""
    vec = np.asarray(vec)
    d = np.sqrt(vec.size)
    if vec.ndim != 1 or d != int(d):
        raise ValueError(f"expected a length d^2 vector, got shape {vec.shape}")
    return vec.reshape(int(d), int(d), order="F")


def hamiltonian_superop(h):
    """Superoperator of the coherent part, -i (I x H - H^T x I)."""
    h = np.asarray(h, dtype=complex)
    eye = np.eye(h.shape[0])
    return -1j * (np.kron(eye, h) - np.kron(h.T, eye))


def lindblad_cross_superop(a, b):
    """Bilinear dissipator block: vec-form of rho -> A rho B^+ - (1/2){B^+ A, rho}.

    With A = B this is the usual Lindblad dissipator; the general form lets a
    dissipator whose operator is a linear combination sum(c_a B_a) be expanded
    over fixed templates with scalar weights c_a * conj(c_b).
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    eye = np.eye(a.shape[0])
    bda = b.conj().T @ a
    return np.kron(b.conj(), a) - 0.5 * np.kron(eye, bda) - 0.5 * np.kron(bda.T, eye)


def dissipator_superop(a):
    """vec-form of the Lindblad dissipator D[A]."""
    return lindblad_cross_superop(a, a)


def build_liouvillian(h, terms=(), check=True):
    """Assemble the (d^2, d^2) generator for H plus a list of `JumpTerm`s.

    H must be Hermitian to within 1e-10 relative to its largest entry.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"H must be square, got shape {h.shape}")
    d = h.shape[0]
    if check:
        scale = max(1.0, np.abs(h).max())
        if np.abs(h - h.conj().T).max() > 1e-10 * scale:
            raise ValueError("H is not Hermitian within tolerance")
    liouv = hamiltonian_superop(h)
    for term in terms:
        term = term if isinstance(term, JumpTerm) else JumpTerm(*term)
        if term.operator.shape != (d, d):
            raise ValueError(
                f"jump operator shape {term.operator.shape} does not match dim {d}")
        liouv += term.rate * dissipator_superop(term.operator)
    return liouv


def check_liouvillian(liouv, rtol=1e-10, eig_tol=1e-8):
    """Verify trace preservation and spectrum location; raises on failure.

    Tolerances scale with max|L| so the checks are meaningful for generators
    in laboratory units.
    """
    liouv = np.asarray(liouv)
    m = liouv.shape[-1]
    d = int(np.sqrt(m))
    scale = max(np.abs(liouv).max(), 1e-300)
    trace_row = liouv.reshape(m, d, d).trace(axis1=1, axis2=2)
    if np.abs(trace_row).max() > rtol * scale:
        raise QmeError("Liouvillian does not preserve trace")
    eigs = np.linalg.eigvals(liouv)
    if eigs.real.max() > eig_tol * max(1.0, scale):
        raise QmeError(f"Liouvillian has eigenvalue with real part "
                       f"{eigs.real.max():.3e} > 0")


def check_density_matrix(rho, herm_tol=1e-10, trace_tol=1e-10, eig_floor=-1e-8):
    """Assert Hermiticity, unit trace and numerical positivity."""
    rho = np.asarray(rho)
    if np.abs(rho - rho.conj().T).max() > herm_tol:
        raise InvalidDensityMatrixError("density matrix is not Hermitian")
    if abs(rho.trace() - 1.0) > trace_tol:
        raise InvalidDensityMatrixError(f"trace is {rho.trace():.12f}, expected 1")
    eigs = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if eigs.min() < eig_floor:
        raise InvalidDensityMatrixError(f"negative eigenvalue {eigs.min():.3e}")


def _trace_row(d, dtype=complex):
    row = np.zeros(d * d, dtype=dtype)
    row[:: d + 1] = 1.0
    return row


def _diagnose_failure(liouv, scale):
    """Classify a failed solve: degenerate null space vs ill conditioning."""
    svals = np.linalg.svd(liouv / scale, compute_uv=False)
    if svals[0] == 0.0:
        return (f"steady state is degenerate (null space dimension {len(svals)})",
                np.inf)
    null_dim = int(np.sum(svals < _RANK_RTOL * svals[0]))
    nonzero = svals[svals >= _RANK_RTOL * svals[0]]
    cond = svals[0] / nonzero[-1]
    if null_dim > 1:
        return f"steady state is degenerate (null space dimension {null_dim})", cond
    if null_dim == 0:
        return "no steady state found (trivial null space)", cond
    return "steady-state solve failed (ill-conditioned system)", cond


def _solve_batch(liouvs, extra_rhs=None, method="lu"):
    """Shared batched solver core.

    liouvs: (n, d^2, d^2).  Returns (x, failures) where x is (n, d^2) with
    vec(rho_ss) per row (NaN where failed) and failures is a list of
    (row, message).  When ``extra_rhs`` (n, d^2, k) is given, the same
    factorization also solves the trace-free systems L y = rhs (used for
    implicit differentiation) and the return is (x, y, failures) with y of
    shape (n, k, d^2).
    """
    liouvs = np.asarray(liouvs, dtype=complex)
    n, m, m2 = liouvs.shape
    if m != m2:
        raise ValueError("Liouvillian batch must be (n, d^2, d^2)")
    d = int(np.sqrt(m))
    if d * d != m:
        raise ValueError("Liouvillian size is not a perfect square")
    k = 0 if extra_rhs is None else extra_rhs.shape[-1]

    scale = np.abs(liouvs).max(axis=(1, 2))
    scale = np.where(scale == 0.0, 1.0, scale)
    scaled = liouvs / scale[:, None, None]

    rhs = np.zeros((n, m + 1, 1 + k), dtype=complex) if method == "qr" else \
        np.zeros((n, m, 1 + k), dtype=complex)
    if extra_rhs is not None:
        # trace-free systems: scale like the matrix rows
        rhs[:, :m, 1:] = extra_rhs / scale[:, None, None]

    failures = []
    x = np.full((n, m), np.nan, dtype=complex)
    y = np.full((n, k, m), np.nan, dtype=complex) if k else None

    if method == "qr":
        trace = np.broadcast_to(_trace_row(d), (n, 1, m))
        aug = np.concatenate([scaled, trace], axis=1)
        rhs[:, m, 0] = 1.0
        q, r = np.linalg.qr(aug)
        rdiag = np.abs(np.einsum("nii->ni", r))
        bad = rdiag.min(axis=1) <= _RANK_RTOL * rdiag.max(axis=1)
        good = ~bad
        if good.any():
            yq = np.einsum("nij,nik->njk", q[good].conj(), rhs[good])
            sol = np.linalg.solve(r[good], yq)
            x[good] = sol[..., 0]
            if k:
                y[good] = sol[..., 1:].transpose(0, 2, 1)
        for row in np.nonzero(bad)[0]:
            msg, cond = _diagnose_failure(liouvs[row], scale[row])
            failures.append((int(row), f"{msg} (condition estimate {cond:.3e})"))
    elif method == "lu":
        # the last row of L is the time derivative of the last diagonal entry,
        # linearly dependent on the other diagonal rows via trace preservation
        square = scaled.copy()
        square[:, -1, :] = _trace_row(d)
        rhs[:, -1, 0] = 1.0
        rhs[:, -1, 1:] = 0.0
        with np.errstate(all="ignore"):
            try:
                sol = np.linalg.solve(square, rhs)
            except np.linalg.LinAlgError:
                sol = np.full_like(rhs, np.nan)
                for row in range(n):
                    try:
                        sol[row] = np.linalg.solve(square[row], rhs[row])
                    except np.linalg.LinAlgError:
                        pass
        x = sol[..., 0]
        if k:
            y = sol[..., 1:].transpose(0, 2, 1)
    else:
        raise ValueError(f"unknown method {method!r}")

    # residual gate on the original (unscaled) generator
    with np.errstate(all="ignore"):
        resid = np.abs(np.einsum("nij,nj->ni", scaled, x)).max(axis=1)
        bad_resid = ~np.isfinite(resid) | (resid > _RESIDUAL_REJECT)
    for row in np.nonzero(bad_resid)[0]:
        if any(r == row for r, _ in failures):
            continue
        msg, cond = _diagnose_failure(liouvs[row], scale[row])
        failures.append((int(row), f"{msg} (condition estimate {cond:.3e})"))
        x[row] = np.nan
        if k:
            y[row] = np.nan

    failures.sort()
    return (x, y, failures) if extra_rhs is not None else (x, failures)


def _finish_states(x, d, normalize=True):
    states = x.reshape(-1, d, d).transpose(0, 2, 1)  # column-stacking unvec
    if normalize:
        with np.errstate(all="ignore"):
            traces = np.einsum("nii->n", states)
            states = states / traces[:, None, None]
    return states


def steady_state(liouv, method="qr", validate=True):
    """Unit-trace steady state of a single Liouvillian.

    Raises `DegenerateSteadyStateError` when the null space is not
    one-dimensional or the solve does not meet the residual gate.
    """
    liouv = np.asarray(liouv, dtype=complex)
    x, failures = _solve_batch(liouv[None], method=method)
    if failures:
        raise DegenerateSteadyStateError(failures[0][1])
    rho = _finish_states(x, int(np.sqrt(liouv.shape[0])))[0]
    if validate:
        check_density_matrix(rho, herm_tol=1e-10, trace_tol=1e-10)
    return rho


def steady_state_batch(liouvs, method="lu", on_failure="raise"):
    """Steady states for a batch (n, d^2, d^2) of independent Liouvillians.

    ``on_failure="raise"`` raises `BatchSolveError` carrying per-row messages
    and the successfully solved rows; ``"mask"`` returns
    (states, failures) with NaN entries for failed rows.
    """
    liouvs = np.asarray(liouvs, dtype=complex)
    x, failures = _solve_batch(liouvs, method=method)
    states = _finish_states(x, int(np.sqrt(liouvs.shape[1])))
    if failures and on_failure == "raise":
        raise BatchSolveError(failures, states)
    if on_failure == "mask":
        return states, failures
    return states


def steady_state_and_derivatives(liouvs, dliouvs, method="lu", on_failure="raise"):
    """Steady states plus parameter derivatives by implicit differentiation.

    Solves L vec(rho) = 0 (unit trace) and, reusing the factorization,
    L vec(drho_k) = -dL_k vec(rho) with tr(drho_k) = 0 for each of the k
    parameter directions in ``dliouvs`` (n, k, d^2, d^2).

    Returns (states (n, d, d), dstates (n, k, d, d)).
    """
    liouvs = np.asarray(liouvs, dtype=complex)
    dliouvs = np.asarray(dliouvs, dtype=complex)
    n, m, _ = liouvs.shape
    d = int(np.sqrt(m))
    k = dliouvs.shape[1]

    x0, failures0 = _solve_batch(liouvs, method=method)
    with np.errstate(all="ignore"):
        rhs = -np.einsum("nkij,nj->nik", dliouvs, x0)
    rhs = np.nan_to_num(rhs)
    x, y, failures = _solve_batch(liouvs, extra_rhs=rhs, method=method)
    failures = sorted(set(failures0) | set(failures))

    with np.errstate(all="ignore"):
        traces = np.einsum("nii->n", _finish_states(x, d, normalize=False))
    states = _finish_states(x, d)
    dstates = y.reshape(n, k, d, d).transpose(0, 1, 3, 2) / traces[:, None, None, None]
    for row, _ in failures:
        states[row] = np.nan
        dstates[row] = np.nan
    if failures and on_failure == "raise":
        raise BatchSolveError(failures, states)
    if on_failure == "mask":
        return states, dstates, failures
    return states, dstates


def expectation(rho, observable):
    """Re tr(rho O) for Hermitian O; asserts the imaginary residue is noise."""
    rho = np.asarray(rho)
    observable = np.asarray(observable)
    if rho.shape[-1] != observable.shape[-1]:
        raise ValueError("dimension mismatch between state and observable")
    value = np.einsum("...ij,...ji->...", rho, observable)
    tol = 1e-10 * max(1.0, float(np.abs(observable).max()))
    if np.abs(np.asarray(value).imag).max() > tol:
        raise QmeError("expectation has non-negligible imaginary part")
    return value.real


def steady_state_gradient(builder, params, observable, observable_jacobian=None,
                          method="lu"):
    """Value and gradient of tr(rho_ss O) per batch row.

    ``builder`` must provide ``liouvillian_and_jacobian(params) -> (L, dL)``
    with L of shape (n, d^2, d^2) and dL of shape (n, k, d^2, d^2) for the k
    differentiable parameters.  When the observable itself depends on those
    parameters, pass ``observable_jacobian`` with shape (n, k, d, d) (or
    broadcastable) to add the tr(rho dO_k) term.
    """
    liouvs, dliouvs = builder.liouvillian_and_jacobian(params)
    states, dstates = steady_state_and_derivatives(liouvs, dliouvs, method=method)
    values = np.einsum("nij,...ji->n", states, observable).real
    grads = np.einsum("nkij,...ji->nk", dstates, observable).real
    if observable_jacobian is not None:
        grads = grads + np.einsum("nij,nkji->nk", states, observable_jacobian).real
    return values, grads


def finite_difference_check(value_and_grad, params, diff_indices, h=1e-5):
    """Max relative discrepancy between supplied gradients and central differences.

    ``value_and_grad(params) -> (values (n,), grads (n, k))`` where the k
    gradient columns correspond to ``diff_indices`` into the parameter axis.
    Differences use the relative step ``h`` of each parameter's magnitude.

    Gradient components of one row carry different units, so each component
    error is measured on the logarithmic scale (|theta * dI/dtheta|, all in
    observable units) against the row's dominant logarithmic gradient.  Rows
    with no parameter dependence at all compare against the batch scale.
    """
    params = np.asarray(params, dtype=float)
    values, grads = value_and_grad(params)
    grads = np.asarray(grads, dtype=float)
    fd = np.empty_like(grads)
    for col, idx in enumerate(diff_indices):
        step = h * np.maximum(np.abs(params[:, idx]), 1e-300)
        plus = params.copy()
        plus[:, idx] += step
        minus = params.copy()
        minus[:, idx] -= step
        fd[:, col] = (value_and_grad(plus)[0] - value_and_grad(minus)[0]) / (2 * step)
    magnitudes = np.abs(params[:, list(diff_indices)])
    log_grads = magnitudes * grads
    log_fd = magnitudes * fd
    row_scale = np.maximum(np.abs(log_grads), np.abs(log_fd)).max(axis=1)
    floor = 1e-12 * max(row_scale.max(), 1e-300)
    rel = np.abs(log_fd - log_grads) / np.maximum(row_scale, floor)[:, None]
    return float(rel.max())


@dataclass(frozen=True)
class PiecewiseLiouvillian:
    """Piecewise-constant generator given as [(duration_s, L), ...] segments."""

    segments: tuple

    def __post_init__(self):
        segs = tuple((float(dur), np.asarray(l, dtype=complex))
                     for dur, l in self.segments if float(dur) > 0.0)
        if not segs:
            raise ValueError("need at least one segment with positive duration")
        object.__setattr__(self, "segments", segs)

    @property
    def total_duration(self):
        return sum(dur for dur, _ in self.segments)


@dataclass
class Trajectory:
    """RK4 output: times (n_t,) in seconds and states (n_t, n_b, d, d)."""

    times: np.ndarray
    states: np.ndarray
    batched: bool = True

    def final(self):
        states = self.states[-1]
        return states if self.batched else states[0]

    def populations(self, level):
        pops = self.states[:, :, level, level].real
        return pops if self.batched else pops[:, 0]


def _rk4_step(vec, liouv, step, t_next):
    """One RK4 step for a constant generator, with the trace-drift guard."""
    k1 = np.einsum("...ij,...j->...i", liouv, vec)
    k2 = np.einsum("...ij,...j->...i", liouv, vec + 0.5 * step * k1)
    k3 = np.einsum("...ij,...j->...i", liouv, vec + 0.5 * step * k2)
    k4 = np.einsum("...ij,...j->...i", liouv, vec + step * k3)
    vec = vec + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    d = int(np.sqrt(vec.shape[-1]))
    traces = vec[..., :: d + 1].sum(axis=-1)
    drift = float(np.abs(traces - 1.0).max())
    if drift > _TRACE_DRIFT_LIMIT:
        raise TraceDriftError(t_next, drift)
    return vec


def _segment_steps(duration, dt):
    """Step sizes covering ``duration``: full dt steps plus a clipped tail."""
    n_full, remainder = divmod(float(duration), dt)
    steps = [dt] * int(round(n_full))
    if remainder > 1e-9 * dt:          # ignore alignment roundoff
        steps.append(remainder)
    return steps


def evolve_rk4(generator, rho0, t_end=None, dt=1e-11, store_every=1):
    """Classic fixed-step RK4 on vec(rho_dot) = L(t) vec(rho).

    ``generator`` is a constant Liouvillian array (optionally batched), a
    `PiecewiseLiouvillian` (steps are clipped at segment boundaries), or a
    callable t -> L sampled at step midpoints.  ``rho0`` may be (d, d) or
    batched (n, d, d).  States are recorded every ``store_every`` steps plus
    at every segment boundary.  Raises `TraceDriftError` when |tr(rho) - 1|
    exceeds 1e-4 at any step.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    rho0 = np.asarray(rho0, dtype=complex)
    batched = rho0.ndim == 3
    if not batched:
        rho0 = rho0[None]
    n, d, _ = rho0.shape
    vec = rho0.transpose(0, 2, 1).reshape(n, d * d)  # column stacking

    if isinstance(generator, PiecewiseLiouvillian):
        segments = generator.segments
        if t_end is not None and abs(t_end - generator.total_duration) > 1e-9 * dt:
            raise ValueError("t_end must match the total segment duration")
        get_liouv = None
    elif callable(generator):
        if t_end is None:
            raise ValueError("t_end required for callable generators")
        segments = ((float(t_end), None),)
        get_liouv = generator
    else:
        if t_end is None:
            raise ValueError("t_end required for constant generators")
        segments = ((float(t_end), np.asarray(generator, dtype=complex)),)
        get_liouv = None

    out_times = [0.0]
    out_states = [vec]
    t = 0.0
    for duration, seg_liouv in segments:
        steps = _segment_steps(duration, dt)
        for i, step in enumerate(steps):
            liouv = seg_liouv if get_liouv is None else \
                np.asarray(get_liouv(t + 0.5 * step), dtype=complex)
            vec = _rk4_step(vec, liouv, step, t + step)
            t += step
            if (i + 1) % store_every == 0 or i == len(steps) - 1:
                out_times.append(t)
                out_states.append(vec)
    times = np.array(out_times)
    states = np.stack(out_states).reshape(len(out_times), n, d, d).transpose(0, 1, 3, 2)
    return Trajectory(times=times, states=states, batched=batched)
