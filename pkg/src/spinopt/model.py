"""Physical domain types and the B-effective field.

Units are fixed throughout the package: Gauss for RF, Gauss/cm for
gradients, Gauss/cm/s for slew, cm for positions, seconds for time and
rad/s for off-resonance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

__all__ = [
    "GAMMA_H",
    "DT_DEFAULT",
    "ValidationError",
    "PhysicsConstants",
    "SpinGrid",
    "Pulse",
    "HardwareLimits",
    "beff",
    "beff_all",
    "validate_grid",
    "equilibrium",
]

#: proton gyromagnetic ratio, rad/s/G
GAMMA_H = 2 * math.pi * 4257.6
#: default sample period, s
DT_DEFAULT = 4e-6


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else [message]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PhysicsConstants:
    gamma: float = GAMMA_H
    dt: float = DT_DEFAULT

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValidationError(f"gamma must be positive, got {self.gamma}")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class HardwareLimits:
    b_max: float
    g_max: float
    s_max: float

    def __post_init__(self):
        for name in ("b_max", "g_max", "s_max"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be strictly positive, got {v}")


@dataclass(frozen=True, eq=False)
class SpinGrid:
    """Voxel ensemble: positions (cm), off-resonance (rad/s), T1/T2 (s), mask.

    Scalar ``t1``/``t2``/``offres`` are broadcast to every voxel. The grid is
    immutable; use :meth:`select` to take a subset.
    """

    positions: np.ndarray
    offres: np.ndarray = None
    t1: np.ndarray = None
    t2: np.ndarray = None
    mask: np.ndarray = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1 and pos.size == 3:
            pos = pos[None, :]
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be (n_M, 3), got {pos.shape}")
        n = pos.shape[0]

        def per_voxel(v, default, dtype=float):
            if v is None:
                v = default
            v = np.array(v, dtype=dtype)
            if v.ndim == 0:
                v = np.full(n, v, dtype=dtype)
            if v.shape != (n,):
                raise ValidationError(f"per-voxel field has shape {v.shape}, expected ({n},)")
            return v

        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "offres", _frozen(per_voxel(self.offres, 0.0)))
        object.__setattr__(self, "t1", _frozen(per_voxel(self.t1, np.inf)))
        object.__setattr__(self, "t2", _frozen(per_voxel(self.t2, np.inf)))
        object.__setattr__(self, "mask", _frozen(per_voxel(self.mask, True, bool), bool))

    @property
    def n_voxels(self):
        return self.positions.shape[0]

    def __len__(self):
        return self.n_voxels

    def select(self, idx):
        """Sub-grid of the voxels picked by a boolean mask or index array."""
        return SpinGrid(
            self.positions[idx], self.offres[idx], self.t1[idx], self.t2[idx], self.mask[idx]
        )

    def with_offres(self, offres):
        return SpinGrid(self.positions, offres, self.t1, self.t2, self.mask)

    def relaxation(self, dt):
        """Per-voxel ``(e1, e2) = exp(-dt/T1), exp(-dt/T2)``; infinite T gives 1."""
        with np.errstate(divide="ignore"):
            e1 = np.exp(-dt / self.t1)
            e2 = np.exp(-dt / self.t2)
        return e1, e2

    @classmethod
    def regular(cls, dims, fov, *, t1=np.inf, t2=np.inf, offres=0.0, mask=True):
        """Cell-centred lattice of ``dims`` voxels spanning ``fov`` cm, centred on 0.

        Voxels are ordered with x varying slowest (C order over (x, y, z)).
        """
        dims = tuple(int(d) for d in dims)
        fov = np.broadcast_to(np.asarray(fov, dtype=float), (3,))
        axes = [(np.arange(d) - (d - 1) / 2) * (f / d) for d, f in zip(dims, fov)]
        xx, yy, zz = np.meshgrid(*axes, indexing="ij")
        pos = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        return cls(pos, offres, t1, t2, mask)


@dataclass(frozen=True, eq=False)
class Pulse:
    """Sampled RF (complex, G) and gradient (n_T x 3, G/cm) waveforms."""

    rf: np.ndarray
    grad: np.ndarray
    dt: float = DT_DEFAULT

    def __post_init__(self):
        rf = np.array(self.rf, dtype=complex).reshape(-1)
        grad = np.array(self.grad, dtype=float)
        if grad.size == 0:
            grad = grad.reshape(0, 3)
        if grad.ndim != 2 or grad.shape[1] != 3:
            raise ValidationError(f"grad must be (n_T, 3), got {grad.shape}")
        if grad.shape[0] != rf.shape[0]:
            raise ValidationError(
                f"rf has {rf.shape[0]} samples but grad has {grad.shape[0]}"
            )
        if not (np.all(np.isfinite(rf)) and np.all(np.isfinite(grad))):
            raise ValidationError("pulse waveforms contain non-finite samples")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValidationError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "rf", _frozen(rf, complex))
        object.__setattr__(self, "grad", _frozen(grad))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_samples(self):
        return self.rf.shape[0]

    def __len__(self):
        return self.n_samples

    @property
    def duration(self):
        return self.n_samples * self.dt

    def slew(self):
        """Forward-difference slew rate with an implicit zero gradient before sample 0."""
        return np.diff(self.grad, axis=0, prepend=np.zeros((1, 3))) / self.dt

    @classmethod
    def zeros(cls, n_samples, dt=DT_DEFAULT):
        return cls(np.zeros(n_samples, complex), np.zeros((n_samples, 3)), dt)


def equilibrium(n_voxels):
    """Magnetization at thermal equilibrium, ``[0, 0, 1]`` per voxel."""
    m = np.zeros((n_voxels, 3))
    m[:, 2] = 1.0
    return m


def validate_grid(grid):
    """Return a list of invariant violations; an empty list means the grid is usable."""
    problems = []
    pos = np.asarray(grid.positions)
    bad = np.flatnonzero(~np.all(np.isfinite(pos), axis=1))
    for i in bad:
        problems.append(f"voxel {i}: non-finite position {pos[i].tolist()}")
    bad = np.flatnonzero(~np.isfinite(grid.offres))
    for i in bad:
        problems.append(f"voxel {i}: non-finite off-resonance")
    for name in ("t1", "t2"):
        v = getattr(grid, name)
        for i in np.flatnonzero(~(v > 0)):
            problems.append(f"voxel {i}: {name} must be positive, got {v[i]}")
    for i in np.flatnonzero(grid.t2 > grid.t1):
        problems.append(f"voxel {i}: t2 exceeds t1 ({grid.t2[i]} > {grid.t1[i]})")
    return problems


def check_grid(grid):
    problems = validate_grid(grid)
    if problems:
        raise ValidationError(f"invalid spin grid: {problems[0]}", problems)
    return grid


def beff(rf_t, g_t, grid, consts=PhysicsConstants()):
    """B-effective (G) at one time sample, shape ``(n_M, 3)``.

    Row ``i`` is ``[Re rf_t, Im rf_t, <g_t, r_i> + offres_i / gamma]``.
    """
    rf_t = complex(rf_t)
    g_t = np.asarray(g_t, dtype=float).reshape(3)
    if not (np.isfinite(rf_t) and np.all(np.isfinite(g_t))):
        raise ValidationError("beff: non-finite waveform sample")
    out = np.empty((grid.n_voxels, 3))
    out[:, 0] = rf_t.real
    out[:, 1] = rf_t.imag
    out[:, 2] = grid.positions @ g_t + grid.offres / consts.gamma
    return out


def beff_all(pulse, grid, consts=PhysicsConstants()):
    """B-effective for every sample, shape ``(n_T, n_M, 3)``."""
    n_t = pulse.n_samples
    out = np.empty((n_t, grid.n_voxels, 3))
    out[:, :, 0] = pulse.rf.real[:, None]
    out[:, :, 1] = pulse.rf.imag[:, None]
    out[:, :, 2] = pulse.grad @ grid.positions.T + (grid.offres / consts.gamma)[None, :]
    return out
