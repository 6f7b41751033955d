"""Robustness of a designed pulse to timing and field-map errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PhysicsConstants, Pulse, ValidationError
from .objective import nrmse
from .sim import simulate

__all__ = ["Perturbation", "delay_gradient", "evaluate_perturbations"]


@dataclass(frozen=True)
class Perturbation:
    gradient_delay: int = 0
    offres_scale: float = 1.0

    @property
    def label(self):
        return f"delay={self.gradient_delay:+d},offres_scale={self.offres_scale:g}"


def delay_gradient(pulse, k):
    """Shift the gradient by ``k`` whole samples relative to the RF (zero-filled)."""
    k = int(k)
    n = pulse.n_samples
    if abs(k) >= max(n, 1) and k != 0:
        raise ValidationError(f"gradient delay {k} is not shorter than the pulse ({n} samples)")
    grad = np.zeros_like(pulse.grad)
    if k > 0:
        grad[k:] = pulse.grad[:-k]
    elif k < 0:
        grad[:k] = pulse.grad[-k:]
    else:
        grad[:] = pulse.grad
    return Pulse(pulse.rf, grad, pulse.dt)


def evaluate_perturbations(grid, pulse, target, kind, perturbations, consts=None, n_jobs=None):
    """NRMSE of the nominal and each perturbed scenario.

    Returns a list of dicts with ``gradient_delay``, ``offres_scale``,
    ``nrmse`` and ``delta_pp`` (change against the nominal in percentage
    points). The first row is always the unperturbed baseline.
    """
    consts = PhysicsConstants(dt=pulse.dt) if consts is None else consts
    sub = grid.select(grid.mask)
    tgt = target.select(grid.mask)

    def score(p):
        g = sub if p.offres_scale == 1.0 else sub.with_offres(sub.offres * p.offres_scale)
        m, _ = simulate(g, delay_gradient(pulse, p.gradient_delay), consts=consts, n_jobs=n_jobs)
        return nrmse(m, tgt, kind)

    base = score(Perturbation())
    rows = [dict(gradient_delay=0, offres_scale=1.0, nrmse=base, delta_pp=0.0)]
    for p in perturbations:
        v = score(p)
        rows.append(dict(gradient_delay=p.gradient_delay, offres_scale=float(p.offres_scale),
                         nrmse=v, delta_pp=100.0 * (v - base)))
    return rows
