"""Change of variables that makes the RF and slew limits implicit.

A feasible pulse is parameterised by ``rho`` (squashed RF magnitude),
``theta`` (RF phase) and ``s`` (squashed slew)::

    b = b_max * exp(1j*theta) * squash(rho)
    slew = s_max * squash(s)
    g = dt * cumsum(slew)

With the default arctan squash, ``squash(x) = 2/pi * arctan(x)`` maps the
real line onto ``(-1, 1)``, so the peak RF and slew limits hold for any finite
variables. The gradient before sample 0 is taken to be zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import PulseGradient
from .model import Pulse, ValidationError

__all__ = [
    "Squash",
    "ArctanSquash",
    "TanhSquash",
    "ARCTAN",
    "SlewOperator",
    "DesignVariables",
    "VariableGradient",
    "encode",
    "decode",
    "decoded_slew",
    "chain_to_vars",
    "GradientReport",
    "check_gmax",
    "ramp_down",
]


class Squash:
    """Strictly increasing map from the real line onto ``(-1, 1)``."""

    def value(self, x):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError


class ArctanSquash(Squash):
    def value(self, x):
        return (2 / np.pi) * np.arctan(x)

    def derivative(self, x):
        return (2 / np.pi) / (1 + np.square(x))

    def inverse(self, y):
        return np.tan((np.pi / 2) * np.asarray(y, dtype=float))


class TanhSquash(Squash):
    def value(self, x):
        return np.tanh(x)

    def derivative(self, x):
        return 1 / np.square(np.cosh(x))

    def inverse(self, y):
        return np.arctanh(y)


ARCTAN = ArctanSquash()


@dataclass(frozen=True)
class SlewOperator:
    """First difference divided by ``dt`` with an implicit zero initial gradient."""

    dt: float

    def apply(self, g):
        g = np.asarray(g, dtype=float)
        return np.diff(g, axis=0, prepend=np.zeros((1,) + g.shape[1:])) / self.dt

    def inverse(self, s):
        return self.dt * np.cumsum(np.asarray(s, dtype=float), axis=0)

    def adjoint_inverse(self, dg):
        """Transpose of :meth:`inverse`: ``dt`` times suffix sums."""
        dg = np.asarray(dg, dtype=float)
        return self.dt * np.cumsum(dg[::-1], axis=0)[::-1]

    def matrix(self, n):
        return (np.eye(n) - np.eye(n, k=-1)) / self.dt


@dataclass(frozen=True, eq=False)
class DesignVariables:
    rho: np.ndarray
    theta: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float).reshape(-1)
        theta = np.array(self.theta, dtype=float).reshape(-1)
        s = np.array(self.s, dtype=float).reshape(-1, 3)
        if not (rho.shape == theta.shape and s.shape[0] == rho.shape[0]):
            raise ValidationError(
                f"inconsistent variable lengths {rho.shape}, {theta.shape}, {s.shape}"
            )
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(theta)) and np.all(np.isfinite(s))):
            raise ValidationError("design variables must be finite")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "s", s)

    @property
    def n_samples(self):
        return self.rho.shape[0]

    def to_vector(self, blocks=("rf", "grad")):
        parts = []
        if "rf" in blocks:
            parts += [self.rho, self.theta]
        if "grad" in blocks:
            parts.append(self.s.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_vector(self, x, blocks=("rf", "grad")):
        """Copy with the named blocks replaced from the flat vector ``x``."""
        n = self.n_samples
        x = np.asarray(x, dtype=float)
        rho, theta, s = self.rho, self.theta, self.s
        k = 0
        if "rf" in blocks:
            rho, theta = x[:n], x[n : 2 * n]
            k = 2 * n
        if "grad" in blocks:
            s = x[k : k + 3 * n].reshape(n, 3)
        return DesignVariables(rho, theta, s)


@dataclass(frozen=True, eq=False)
class VariableGradient:
    d_rho: np.ndarray
    d_theta: np.ndarray
    d_s: np.ndarray

    def to_vector(self, blocks=("rf", "grad")):
        parts = []
        if "rf" in blocks:
            parts += [self.d_rho, self.d_theta]
        if "grad" in blocks:
            parts.append(self.d_s.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


def encode(pulse, limits, squash=ARCTAN):
    """Design variables of a strictly feasible pulse.

    Raises
    ------
    ValidationError
        If any RF sample reaches ``b_max`` or any slew sample reaches
        ``s_max``; the message names the first offending sample.
    """
    mag = np.abs(pulse.rf)
    bad = np.flatnonzero(mag >= limits.b_max)
    if bad.size:
        k = bad[0]
        raise ValidationError(
            f"sample {k}: |rf| = {mag[k]:.6g} G is not strictly below b_max = {limits.b_max} G"
        )
    slew = SlewOperator(pulse.dt).apply(pulse.grad)
    bad = np.argwhere(np.abs(slew) >= limits.s_max)
    if bad.size:
        k, ax = bad[0]
        raise ValidationError(
            f"sample {k}, axis {'xyz'[ax]}: slew {slew[k, ax]:.6g} G/cm/s is not strictly "
            f"below s_max = {limits.s_max} G/cm/s"
        )
    rho = squash.inverse(mag / limits.b_max)
    theta = np.where(mag > 0, np.angle(pulse.rf), 0.0)
    s = squash.inverse(slew / limits.s_max)
    return DesignVariables(rho, theta, s)


def decoded_slew(variables, limits, squash=ARCTAN):
    return limits.s_max * squash.value(variables.s)


def decode(variables, limits, dt, squash=ARCTAN):
    """Pulse parameterised by ``variables``; always within the RF and slew limits."""
    amp = limits.b_max * squash.value(variables.rho)
    rf = amp * np.exp(1j * variables.theta)
    grad = SlewOperator(dt).inverse(decoded_slew(variables, limits, squash))
    return Pulse(rf, grad, dt)


def chain_to_vars(pg, variables, limits, dt, squash=ARCTAN):
    """Pull a pulse-space gradient back to the design variables."""
    amp = limits.b_max * squash.value(variables.rho)
    phase = np.exp(1j * variables.theta)
    # d_rf packs dL/dRe + 1j dL/dIm; rotating it by -theta splits it into
    # radial (real) and tangential (imaginary) parts
    proj = pg.d_rf * np.conj(phase)
    d_rho = proj.real * limits.b_max * squash.derivative(variables.rho)
    d_theta = amp * proj.imag
    d_slew = SlewOperator(dt).adjoint_inverse(pg.d_grad)
    d_s = d_slew * limits.s_max * squash.derivative(variables.s)
    return VariableGradient(d_rho, d_theta, d_s)


@dataclass
class GradientReport:
    peak: np.ndarray
    g_max: float

    @property
    def ok(self):
        return bool(np.all(self.peak <= self.g_max))

    def raise_if_violated(self):
        if not self.ok:
            ax = int(np.argmax(self.peak))
            raise ValidationError(
                f"gradient peak {self.peak[ax]:.6g} G/cm on axis {'xyz'[ax]} exceeds "
                f"g_max = {self.g_max} G/cm"
            )


def check_gmax(pulse, limits):
    """Per-axis peak gradient amplitude against ``g_max``."""
    peak = np.max(np.abs(pulse.grad), axis=0) if pulse.n_samples else np.zeros(3)
    return GradientReport(peak, limits.g_max)


def ramp_down(pulse, limits, margin=0.9):
    """Append samples that bring every gradient axis linearly back to zero.

    The ramp uses at most ``margin * s_max`` and the RF is zero during it.
    """
    g_end = pulse.grad[-1] if pulse.n_samples else np.zeros(3)
    peak = np.max(np.abs(g_end))
    if peak == 0:
        return pulse
    n = int(np.ceil(peak / (margin * limits.s_max * pulse.dt)))
    frac = (np.arange(n - 1, -1, -1) / n)[:, None]
    ramp = frac * g_end[None, :]
    return Pulse(
        np.concatenate([pulse.rf, np.zeros(n, complex)]),
        np.concatenate([pulse.grad, ramp]),
        pulse.dt,
    )
