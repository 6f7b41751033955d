"""L-BFGS with a strong-Wolfe line search, and the pulse design drivers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import time
import warnings

import numpy as np

from .adjoint import backprop
from .constraint import ARCTAN, chain_to_vars, check_gmax, decode, decoded_slew, encode
from .model import HardwareLimits, PhysicsConstants, ValidationError
from .objective import LossSpec, evaluate_loss, nrmse
from .sim import simulate

__all__ = [
    "LbfgsOptions",
    "LbfgsResult",
    "NumericalError",
    "lbfgs_minimize",
    "DesignProblem",
    "DesignResult",
    "HISTORY_COLUMNS",
    "alternating_design",
    "simultaneous_design",
    "design",
]

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "block", "loss", "nrmse", "peak_b", "peak_g", "peak_s", "seconds")


class NumericalError(RuntimeError):
    """The objective produced a non-finite value."""


class LineSearchFailure(Exception):
    pass


@dataclass(frozen=True)
class LbfgsOptions:
    memory: int = 10
    max_iter: int = 20
    c1: float = 1e-4
    c2: float = 0.9
    grad_tol: float = 1e-10
    f_tol: float = 1e-14
    max_ls: int = 25

    def __post_init__(self):
        if self.memory < 1:
            raise ValidationError("L-BFGS memory must be >= 1")
        if not (0 < self.c1 < self.c2 < 1):
            raise ValidationError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.max_iter < 0 or self.max_ls < 1:
            raise ValidationError("iteration caps must be non-negative")


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    history: list
    n_iter: int
    n_evals: int
    status: str
    line_search_failed: bool = False

    @property
    def converged(self):
        return self.status in ("gtol", "ftol")


def _cubic_min(a0, f0, d0, a1, f1, d1):
    """Minimiser of the cubic interpolating two points with slopes, or None."""
    if a0 == a1:
        return None
    e1 = d0 + d1 - 3 * (f0 - f1) / (a0 - a1)
    disc = e1 * e1 - d0 * d1
    if not np.isfinite(disc) or disc < 0:
        return None
    e2 = np.copysign(np.sqrt(disc), a1 - a0)
    den = d1 - d0 + 2 * e2
    if den == 0:
        return None
    return a1 - (a1 - a0) * (d1 + e2 - e1) / den


def _strong_wolfe(phi, f0, d0, alpha, c1, c2, max_evals):
    """Return ``(alpha, f, g, n_evals)`` satisfying the strong Wolfe conditions."""
    evals = 0
    a_prev, f_prev, d_prev = 0.0, f0, d0

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        nonlocal evals
        while evals < max_evals:
            width = hi - lo
            a = None
            if np.isfinite(f_hi):
                a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not (lo_b <= a <= hi_b):
                a = lo + 0.5 * width
            f, g, d = phi(a)
            evals += 1
            if not np.isfinite(f) or f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = a, f, d
        raise LineSearchFailure("zoom exhausted its evaluation budget")

    first = True
    while evals < max_evals:
        f, g, d = phi(alpha)
        evals += 1
        if not np.isfinite(f) or f > f0 + c1 * alpha * d0 or (not first and f >= f_prev):
            a, f, g = zoom(a_prev, f_prev, d_prev, alpha, f, d)
            return a, f, g, evals
        if abs(d) <= -c2 * d0:
            return alpha, f, g, evals
        if d >= 0:
            a, f, g = zoom(alpha, f, d, a_prev, f_prev, d_prev)
            return a, f, g, evals
        a_next = _cubic_min(a_prev, f_prev, d_prev, alpha, f, d)
        lo_b, hi_b = alpha + 1.1 * (alpha - a_prev), alpha + 10 * (alpha - a_prev)
        if a_next is None or not (lo_b <= a_next <= hi_b):
            a_next = alpha + 2 * (alpha - a_prev)
        a_prev, f_prev, d_prev = alpha, f, d
        alpha = a_next
        first = False
    raise LineSearchFailure("bracketing exhausted its evaluation budget")


def _initial_scaling(s, y, groups):
    """Diagonal of the initial inverse Hessian, ``s.y / y.y`` per index group."""
    if groups is None:
        return (s @ y) / (y @ y)
    scale = np.empty_like(s)
    fallback = (s @ y) / (y @ y)
    for sl in groups:
        ys = y[sl] @ y[sl]
        sy = s[sl] @ y[sl]
        scale[sl] = sy / ys if ys > 0 and sy > 0 else fallback
    return scale


def lbfgs_minimize(fun, x0, opts=LbfgsOptions(), groups=None):
    """Minimise ``fun(x) -> (value, gradient)`` with limited-memory BFGS.

    ``groups`` optionally partitions ``x`` into slices that each get their
    own initial inverse-Hessian scale; by default one scalar is used.

    Every accepted step satisfies the sufficient-decrease condition, so
    ``history`` (the value at ``x0`` followed by each accepted value) is
    non-increasing. A failed line search discards the step and clears the
    curvature memory; a failure from a steepest-descent start ends the run
    with ``line_search_failed`` set and the best point so far.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    f = float(f)
    g = np.array(g, dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError(f"objective is not finite at the starting point ({f})")
    history = [f]
    n_evals = 1
    s_mem, y_mem, rho_mem = [], [], []
    status = "maxiter"
    ls_failed = False
    it = 0

    def along(d):
        def phi(a):
            nonlocal n_evals
            n_evals += 1
            fa, ga = fun(x + a * d)
            ga = np.asarray(ga, dtype=float)
            return float(fa), ga, float(ga @ d)

        return phi

    while it < opts.max_iter:
        if np.max(np.abs(g), initial=0.0) <= opts.grad_tol:
            status = "gtol"
            break
        # two-loop recursion
        q = -g
        alphas = []
        for s, y, r in zip(reversed(s_mem), reversed(y_mem), reversed(rho_mem)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_mem:
            q *= _initial_scaling(s_mem[-1], y_mem[-1], groups)
        for (s, y, r), a in zip(zip(s_mem, y_mem, rho_mem), reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        d = q
        d0 = float(g @ d)
        if not d0 < 0:
            s_mem, y_mem, rho_mem = [], [], []
            d = -g
            d0 = float(g @ d)
        alpha = 1.0 if s_mem else min(1.0, 1.0 / np.linalg.norm(g))
        try:
            a, f_new, g_new, _ = _strong_wolfe(along(d), f, d0, alpha, opts.c1, opts.c2, opts.max_ls)
        except LineSearchFailure as exc:
            if not s_mem:
                status = "linesearch"
                ls_failed = True
                logger.debug("line search failed from steepest descent: %s", exc)
                break
            logger.debug("line search failed, resetting memory: %s", exc)
            s_mem, y_mem, rho_mem = [], [], []
            it += 1
            continue
        step = a * d
        y = g_new - g
        sy = float(step @ y)
        x = x + step
        f_old, f, g = f, f_new, g_new
        history.append(f)
        it += 1
        if sy > 1e-16 * np.linalg.norm(step) * np.linalg.norm(y):
            s_mem.append(step)
            y_mem.append(y)
            rho_mem.append(1.0 / sy)
            if len(s_mem) > opts.memory:
                s_mem.pop(0)
                y_mem.pop(0)
                rho_mem.pop(0)
        if abs(f_old - f) <= opts.f_tol * max(1.0, abs(f)):
            status = "ftol"
            break
    else:
        if np.max(np.abs(g), initial=0.0) <= opts.grad_tol:
            status = "gtol"
    return LbfgsResult(x, f, g, history, it, n_evals, status, ls_failed)


@dataclass
class DesignProblem:
    """Everything the design drivers need.

    ``init_pulse`` must be strictly feasible (it is passed through
    :func:`~spinopt.constraint.encode`). Only voxels with ``grid.mask`` set
    enter the simulation.
    """

    grid: object
    target: object
    loss: LossSpec
    limits: HardwareLimits
    init_pulse: object
    consts: PhysicsConstants = None
    n_outer: int = 10
    mode: str = "alternating"
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)
    rel_tol: float = 1e-8
    squash: object = ARCTAN
    n_jobs: int = None

    def __post_init__(self):
        if self.consts is None:
            self.consts = PhysicsConstants(dt=self.init_pulse.dt)
        if self.mode not in ("alternating", "simultaneous"):
            raise ValidationError(f"unknown update mode {self.mode!r}")
        if self.n_outer < 0:
            raise ValidationError("n_outer must be >= 0")
        if self.target.n_voxels != self.grid.n_voxels:
            raise ValidationError("target and grid sizes differ")


@dataclass
class DesignResult:
    pulse: object
    variables: object
    loss: float
    nrmse: float
    history: list
    accepted: list
    warnings: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.accepted[0]


class _Evaluator:
    """Loss and variable-space gradient for one design problem."""

    def __init__(self, problem):
        self.p = problem
        mask = problem.grid.mask
        self.grid = problem.grid.select(mask)
        self.target = problem.target.select(mask)
        self.n_evals = 0

    def pulse(self, variables):
        return decode(variables, self.p.limits, self.p.consts.dt, self.p.squash)

    def value_and_grad(self, variables):
        p = self.p
        pulse = self.pulse(variables)
        m, traj = simulate(self.grid, pulse, consts=p.consts, n_jobs=p.n_jobs)
        value, dm, d_rf = evaluate_loss(p.loss, m, self.target, pulse.rf)
        self.n_evals += 1
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value}")
        pg = backprop(traj, dm, self.grid, pulse, p.consts, n_jobs=p.n_jobs)
        pg.d_rf[:] += d_rf
        return value, chain_to_vars(pg, variables, p.limits, p.consts.dt, p.squash), m

    def block_objective(self, base, blocks):
        def fun(x):
            v = base.with_vector(x, blocks)
            value, vg, _ = self.value_and_grad(v)
            return value, vg.to_vector(blocks)

        return fun

    def record(self, variables, it, block, t0):
        p = self.p
        pulse = self.pulse(variables)
        m, _ = simulate(self.grid, pulse, consts=p.consts, n_jobs=p.n_jobs)
        value = evaluate_loss(p.loss, m, self.target, pulse.rf)[0]
        slew = decoded_slew(variables, p.limits, p.squash)
        row = {
            "iter": it,
            "block": block,
            "loss": value,
            "nrmse": nrmse(m, self.target, p.loss.kind),
            "peak_b": float(np.max(np.abs(pulse.rf), initial=0.0)),
            "peak_g": float(np.max(np.abs(pulse.grad), initial=0.0)),
            "peak_s": float(np.max(np.abs(slew), initial=0.0)),
            "seconds": time.perf_counter() - t0,
        }
        return row


def _groups(variables, blocks):
    """Per-variable-kind slices so each kind gets its own L-BFGS scaling."""
    n = variables.n_samples
    sizes = {"rf": (n, n), "grad": (3 * n,)}
    out, k = [], 0
    for b in blocks:
        for size in sizes[b]:
            out.append(slice(k, k + size))
            k += size
    return out if len(out) > 1 else None


def _run(problem, blocks_per_outer, opts):
    t0 = time.perf_counter()
    ev = _Evaluator(problem)
    variables = encode(problem.init_pulse, problem.limits, problem.squash)
    row = ev.record(variables, 0, "init", t0)
    history = [row]
    accepted = [row["loss"]]
    notes = []
    current = row["loss"]
    for it in range(1, problem.n_outer + 1):
        start = current
        for name, blocks in blocks_per_outer:
            fun = ev.block_objective(variables, blocks)
            res = lbfgs_minimize(fun, variables.to_vector(blocks), opts, _groups(variables, blocks))
            if res.line_search_failed:
                msg = f"outer iteration {it}, block {name}: line search failed after {res.n_iter} steps"
                warnings.warn(msg, RuntimeWarning, stacklevel=3)
                notes.append(msg)
            variables = variables.with_vector(res.x, blocks)
            accepted.extend(res.history[1:])
            current = res.value
            row = ev.record(variables, it, name, t0)
            history.append(row)
            check = check_gmax(ev.pulse(variables), problem.limits)
            if not check.ok:
                logger.warning(
                    "iteration %d: gradient peak %.4g G/cm exceeds g_max", it, check.peak.max()
                )
        if start - current < problem.rel_tol * max(abs(start), np.finfo(float).tiny):
            logger.info("stopping after outer iteration %d: relative decrease below %g", it, problem.rel_tol)
            break
    pulse = ev.pulse(variables) if problem.n_outer > 0 else problem.init_pulse
    return DesignResult(pulse, variables, history[-1]["loss"], history[-1]["nrmse"], history, accepted, notes)


def alternating_design(problem):
    """Alternate L-BFGS over the RF variables and the slew variables.

    Each of the ``n_outer`` outer iterations first optimises ``(rho, theta)``
    with the slew variables fixed, then the slew variables with the RF fixed.
    """
    return _run(problem, [("rf", ("rf",)), ("grad", ("grad",))], problem.lbfgs)


def simultaneous_design(problem):
    """One L-BFGS run over all variables per outer iteration.

    The run gets twice ``lbfgs.max_iter`` steps, the same step budget as one
    alternating outer iteration.
    """
    opts = replace(problem.lbfgs, max_iter=2 * problem.lbfgs.max_iter)
    return _run(problem, [("all", ("rf", "grad"))], opts)


def design(problem):
    if problem.mode == "simultaneous":
        return simultaneous_design(problem)
    return alternating_design(problem)
