"""Discrete-time Bloch simulation: rotate about B-effective, then relax.

Each step maps ``m -> E R m + e`` where ``R`` rotates by
``phi = -gamma*dt*|B|`` about ``u = B/|B|``, ``E = diag(e2, e2, e1)`` and
``e = [0, 0, 1 - e1]``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import PhysicsConstants, ValidationError, beff_all, check_grid, equilibrium

__all__ = [
    "EPS_B",
    "EPS_PHI",
    "CHUNK_SIZE",
    "RotationDecomposition",
    "Trajectory",
    "decompose",
    "rotation_matrix",
    "step",
    "simulate",
]

#: below this field magnitude (G) a step is treated as the identity rotation
EPS_B = 1e-12
#: below this angle (rad) the sinc-like factors use Taylor expansions
EPS_PHI = 1e-10
#: voxels per work item; fixed so results do not depend on the worker count
CHUNK_SIZE = 1024

_AXIS_DEFAULT = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RotationDecomposition:
    """Rodrigues parameters of one step; array fields broadcast over voxels."""

    u: np.ndarray
    phi: np.ndarray
    cos_phi: np.ndarray
    sin_phi: np.ndarray
    c: np.ndarray
    s: np.ndarray
    b_norm: np.ndarray

    def matrix(self):
        return rotation_matrix(self.u, self.phi)


def _decompose(B, gamma_dt):
    """Vectorised decomposition of fields ``B`` with shape ``(..., 3)``."""
    B = np.asarray(B, dtype=float)
    b_norm = np.sqrt(np.einsum("...i,...i->...", B, B))
    small = b_norm < EPS_B
    safe = np.where(small, 1.0, b_norm)
    u = np.where(small[..., None], _AXIS_DEFAULT, B / safe[..., None])
    phi = np.where(small, 0.0, -gamma_dt * b_norm)
    sin_phi = np.sin(phi)
    cos_phi = np.cos(phi)
    tiny = np.abs(phi) < EPS_PHI
    phi_safe = np.where(tiny, 1.0, phi)
    # 1 - cos(phi) = 2 sin^2(phi/2) avoids cancellation for small angles
    one_minus_cos = 2.0 * np.sin(0.5 * phi) ** 2
    c = np.where(tiny, 0.5 * phi - phi**3 / 24.0, one_minus_cos / phi_safe)
    s = np.where(tiny, 1.0 - phi**2 / 6.0, sin_phi / phi_safe)
    return u, phi, cos_phi, sin_phi, c, s, b_norm


def decompose(B, consts=PhysicsConstants()):
    """Axis/angle decomposition of a B-effective vector (or stack of them)."""
    B = np.asarray(B, dtype=float)
    if not np.all(np.isfinite(B)):
        raise ValidationError("decompose: non-finite field")
    return RotationDecomposition(*_decompose(B, consts.gamma * consts.dt))


def rotation_matrix(u, phi):
    """``cos(phi) I + (1 - cos(phi)) u u^T + sin(phi) [u]_x`` for a single axis."""
    u = np.asarray(u, dtype=float)
    phi = float(phi)
    ux = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.cos(phi) * np.eye(3) + (1 - np.cos(phi)) * np.outer(u, u) + np.sin(phi) * ux


def _rotate(u, phi, cos_phi, sin_phi, c, m):
    """Apply the Rodrigues rotation row-wise; ``phi * c`` equals ``1 - cos(phi)``."""
    um = np.einsum("...i,...i->...", u, m)
    return (
        cos_phi[..., None] * m
        + (phi * c * um)[..., None] * u
        + sin_phi[..., None] * np.cross(u, m)
    )


def _relax(rm, e1, e2, out=None):
    if out is None:
        out = np.empty_like(rm)
    out[..., 0] = e2 * rm[..., 0]
    out[..., 1] = e2 * rm[..., 1]
    out[..., 2] = e1 * rm[..., 2] + (1.0 - e1)
    return out


def step(m, rot, e1=1.0, e2=1.0):
    """One simulation step: rotate by ``rot`` then relax with ``e1``, ``e2``."""
    m = np.asarray(m, dtype=float)
    rm = _rotate(rot.u, rot.phi, rot.cos_phi, rot.sin_phi, rot.c, m)
    return _relax(rm, np.asarray(e1, float), np.asarray(e2, float))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Adjoint workspace recorded by :func:`simulate`.

    ``states[t]`` is the magnetization before step ``t`` (``n_T + 1`` entries);
    ``fields[t]`` is the B-effective applied at step ``t``. Rotation
    decompositions are recomputed from ``fields`` in the backward pass.
    """

    states: np.ndarray
    fields: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    consts: PhysicsConstants

    @property
    def n_steps(self):
        return self.fields.shape[0]

    @property
    def final(self):
        return self.states[-1]

    @property
    def nbytes(self):
        return self.states.nbytes + self.fields.nbytes


def _chunks(n, size=CHUNK_SIZE):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _run_chunks(fn, n, n_jobs):
    chunks = _chunks(n)
    if n_jobs is None or n_jobs <= 1 or len(chunks) == 1:
        return [fn(sl) for sl in chunks]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, chunks))


def simulate(grid, pulse, m0=None, consts=None, *, n_jobs=None):
    """Forward Bloch simulation of ``pulse`` on every voxel of ``grid``.

    Parameters
    ----------
    grid : SpinGrid
    pulse : Pulse
    m0 : array (n_M, 3), optional
        Initial magnetization; equilibrium when omitted.
    consts : PhysicsConstants, optional
        Defaults to the proton gamma and ``pulse.dt``.
    n_jobs : int, optional
        Worker threads over voxel chunks. Results do not depend on it.

    Returns
    -------
    m_final : ndarray (n_M, 3)
    traj : Trajectory
    """
    check_grid(grid)
    if consts is None:
        consts = PhysicsConstants(dt=pulse.dt)
    elif not np.isclose(consts.dt, pulse.dt, rtol=1e-12, atol=0):
        raise ValidationError(f"constants dt={consts.dt} differs from pulse dt={pulse.dt}")
    n_m = grid.n_voxels
    m0 = equilibrium(n_m) if m0 is None else np.array(m0, dtype=float)
    if m0.shape != (n_m, 3):
        raise ValidationError(f"m0 has shape {m0.shape}, grid has {n_m} voxels")
    if not np.all(np.isfinite(m0)):
        raise ValidationError("m0 contains non-finite entries")

    n_t = pulse.n_samples
    e1, e2 = grid.relaxation(consts.dt)
    fields = beff_all(pulse, grid, consts)
    states = np.empty((n_t + 1, n_m, 3))
    states[0] = m0
    gamma_dt = consts.gamma * consts.dt

    def run(sl):
        m = states[0, sl]
        e1c, e2c = e1[sl], e2[sl]
        for t in range(n_t):
            u, phi, cp, sp, c, _, _ = _decompose(fields[t, sl], gamma_dt)
            m = _relax(_rotate(u, phi, cp, sp, c, m), e1c, e2c, out=states[t + 1, sl])

    _run_chunks(run, n_m, n_jobs)
    traj = Trajectory(states, fields, e1, e2, consts)
    return states[-1].copy(), traj
