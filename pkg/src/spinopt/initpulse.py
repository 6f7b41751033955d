"""Initial waveforms: loading from file and a simple kt-points generator.

The kt-points generator is a deliberately small stand-in: it places RF
subpulses at the lowest-frequency excitation k-space locations where the
target pattern has the most energy, joins them with triangular gradient
blips, and fits the subpulse weights with an iterative magnitude
least-squares small-tip model obtained from the simulator itself.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools

import numpy as np

from .constraint import SlewOperator
from .io import read_pulse
from .model import Pulse, PhysicsConstants, ValidationError
from .objective import OV90, canonical_kind
from .sim import simulate

__all__ = ["InitSpec", "MARGIN", "init_from_file", "init_ktpoints", "make_initial_pulse"]

#: fraction of each hardware limit the generated waveforms may use
MARGIN = 0.9


@dataclass(frozen=True)
class InitSpec:
    source: str = "ktpoints"
    path: str = None
    n_points: int = 5
    dwell: float = 2e-4
    max_duration: float = None
    seed: int = 0


def init_from_file(path, limits=None, *, eps=1e-2):
    """Read a waveform file and make it usable as a design start.

    If the RF peak reaches ``b_max`` the RF is scaled so the peak becomes
    ``b_max * (1 - eps)``. Slew cannot be repaired by scaling without
    changing k-space, so a slew violation raises.
    """
    pulse = read_pulse(path)
    if limits is None:
        return pulse
    peak = np.max(np.abs(pulse.rf), initial=0.0)
    if peak >= limits.b_max:
        scale = limits.b_max * (1 - eps) / peak
        pulse = Pulse(pulse.rf * scale, pulse.grad, pulse.dt)
    slew = SlewOperator(pulse.dt).apply(pulse.grad)
    bad = np.argwhere(np.abs(slew) >= limits.s_max)
    if bad.size:
        k, ax = bad[0]
        raise ValidationError(
            f"{path}: slew {slew[k, ax]:.6g} G/cm/s at sample {k} axis {'xyz'[ax]} "
            f"violates s_max = {limits.s_max} G/cm/s"
        )
    return pulse


def _excitation_profile(target, kind):
    """Desired flip angle per voxel, weighted."""
    md = target.m_desired
    if canonical_kind(kind) == OV90:
        flip = np.arcsin(np.clip(np.hypot(md[:, 0], md[:, 1]), 0, 1))
    else:
        flip = np.arccos(np.clip(md[:, 2], -1, 1))
    return flip


def _grid_fov(positions):
    fov = np.zeros(3)
    for ax in range(3):
        vals = np.unique(positions[:, ax])
        if vals.size > 1:
            fov[ax] = (vals[-1] - vals[0]) * vals.size / (vals.size - 1)
    return fov


def _pick_kpoints(positions, weights, flip, n_points, rng, max_index=2):
    """Candidate k (cycles/cm) with the largest spectral energy, k=0 last."""
    fov = _grid_fov(positions)
    ranges = [range(-max_index, max_index + 1) if f > 0 else range(1) for f in fov]
    cands = np.array(
        [[j / f if f > 0 else 0.0 for j, f in zip(idx, fov)] for idx in itertools.product(*ranges)]
    )
    p = weights * flip
    energy = np.abs(np.exp(-2j * np.pi * cands @ positions.T) @ p)
    is_zero = np.all(cands == 0, axis=1)
    energy[is_zero] = np.inf
    # random tie-breaking before a stable sort keeps the choice seeded
    order = rng.permutation(len(cands))
    order = order[np.argsort(-energy[order], kind="stable")]
    chosen = cands[order[:n_points]]
    return chosen[::-1]


def _blip(area, dt, s_lim, g_lim):
    """Triangular gradient waveforms with the given per-axis areas (G s/cm)."""
    area = np.asarray(area, dtype=float)
    big = np.max(np.abs(area))
    if big == 0:
        return np.zeros((0, 3))
    step_max = s_lim * dt
    n = int(np.ceil(np.sqrt(big / (dt * step_max))))
    while big / (dt * n) > g_lim:
        n += 1
    shape = np.concatenate([np.arange(1, n + 1), np.arange(n - 1, -1, -1)]).astype(float)
    # shape sums to n^2
    steps = area / (dt * n * n)
    return shape[:, None] * steps[None, :]


def init_ktpoints(grid, target, kind, limits, *, n_points=5, dwell=2e-4, consts=None,
                  max_duration=None, seed=0):
    """kt-points start: RF subpulses at chosen k locations joined by blips.

    Raises
    ------
    ValidationError
        If the dwell is shorter than one sample or the assembled pulse
        exceeds ``max_duration``.
    """
    consts = PhysicsConstants() if consts is None else consts
    dt = consts.dt
    if n_points < 1:
        raise ValidationError("n_points must be >= 1")
    n_dwell = int(round(dwell / dt))
    if n_dwell < 1:
        raise ValidationError(f"dwell {dwell} s is shorter than one sample ({dt} s)")
    rng = np.random.default_rng(seed)
    mask = grid.mask & (target.weight > 0)
    pos = grid.positions[mask]
    flip = _excitation_profile(target, kind)[mask]
    w = target.weight[mask]
    kpts = _pick_kpoints(pos, w, flip, n_points, rng)

    s_lim, g_lim = MARGIN * limits.s_max, MARGIN * limits.g_max
    grad_parts, rf_slots = [], []
    t = 0
    for j, k in enumerate(kpts):
        rf_slots.append((t, t + n_dwell))
        grad_parts.append(np.zeros((n_dwell, 3)))
        t += n_dwell
        if j + 1 < len(kpts):
            # k(t) = -(gamma/2pi) * integral of g from t to the end
            area = -(2 * np.pi / consts.gamma) * (k - kpts[j + 1])
            b = _blip(area, dt, s_lim, g_lim)
            grad_parts.append(b)
            t += b.shape[0]
    grad = np.concatenate(grad_parts, axis=0)
    n_t = grad.shape[0]
    if max_duration is not None and n_t * dt > max_duration * (1 + 1e-12):
        raise ValidationError(
            f"kt-points pulse needs {n_t * dt * 1e3:.3f} ms, more than max_duration "
            f"{max_duration * 1e3:.3f} ms; use a shorter dwell or fewer points"
        )

    # small-tip response of each subpulse, measured with the simulator
    sub = grid.select(mask)
    sub = type(sub)(sub.positions, sub.offres)
    a0 = 1e-6
    cols = []
    for lo, hi in rf_slots:
        rf = np.zeros(n_t, complex)
        rf[lo:hi] = a0
        m, _ = simulate(sub, Pulse(rf, grad, dt), consts=consts)
        cols.append((m[:, 0] + 1j * m[:, 1]) / a0)
    A = np.stack(cols, axis=1)
    sw = np.sqrt(w)
    Aw = A * sw[:, None]
    ridge = 1e-3 * np.linalg.norm(Aw) ** 2 / max(Aw.shape[1], 1)
    lhs = Aw.conj().T @ Aw + ridge * np.eye(Aw.shape[1])
    x = np.linalg.solve(lhs, Aw.conj().T @ (sw * flip))
    for _ in range(20):
        phase = np.exp(1j * np.angle(A @ x))
        x = np.linalg.solve(lhs, Aw.conj().T @ (sw * flip * phase))

    rf = np.zeros(n_t, complex)
    for (lo, hi), xj in zip(rf_slots, x):
        rf[lo:hi] = xj
    peak = np.max(np.abs(rf))
    if peak > MARGIN * limits.b_max:
        rf *= MARGIN * limits.b_max / peak
    return Pulse(rf, grad, dt)


def make_initial_pulse(spec, grid, target, kind, limits, consts=None):
    if spec.source == "file":
        if not spec.path:
            raise ValidationError("init source 'file' needs a path")
        return init_from_file(spec.path, limits)
    if spec.source == "ktpoints":
        return init_ktpoints(
            grid, target, kind, limits, n_points=spec.n_points, dwell=spec.dwell,
            consts=consts, max_duration=spec.max_duration, seed=spec.seed,
        )
    raise ValidationError(f"unknown init source {spec.source!r}")
