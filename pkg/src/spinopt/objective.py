"""Excitation losses, target patterns and NRMSE.

Both losses return ``(value, dL/dM_T, dL/db)`` where the RF term is the
gradient of the ``lam * ||b||^2`` power penalty in the complex-packed
convention of :mod:`spinopt.adjoint`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ValidationError

__all__ = [
    "OV90",
    "IV180",
    "MAG_EPS",
    "TargetPattern",
    "LossSpec",
    "loss_ov90",
    "loss_iv180",
    "evaluate_loss",
    "build_target",
    "cuboid_labels",
    "nrmse",
]

OV90 = "ov90"
IV180 = "iv180"
#: smoothing for the transverse magnitude, |v| -> sqrt(v.v + eps^2)
MAG_EPS = 1e-12

_KIND_ALIASES = {
    "ov90": OV90, "ov90-mls": OV90, "mls": OV90, "saturate": OV90, "ov-saturate": OV90,
    "iv180": IV180, "iv180-longitudinal": IV180, "invert": IV180, "iv-invert": IV180,
}


def canonical_kind(kind):
    try:
        return _KIND_ALIASES[str(kind).lower()]
    except KeyError:
        raise ValidationError(f"unknown loss/pattern kind {kind!r}") from None


@dataclass(frozen=True, eq=False)
class TargetPattern:
    """Desired magnetization per voxel and a weight (0 marks don't-care)."""

    m_desired: np.ndarray
    weight: np.ndarray = None

    def __post_init__(self):
        md = np.array(self.m_desired, dtype=float)
        if md.ndim != 2 or md.shape[1] != 3:
            raise ValidationError(f"m_desired must be (n_M, 3), got {md.shape}")
        w = np.ones(md.shape[0]) if self.weight is None else np.array(self.weight, dtype=float)
        if w.shape != (md.shape[0],):
            raise ValidationError(f"weight has shape {w.shape}, expected ({md.shape[0]},)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite and non-negative")
        if np.any(np.linalg.norm(md, axis=1) > 1 + 1e-12):
            raise ValidationError("target magnetization rows must have norm <= 1")
        object.__setattr__(self, "m_desired", md)
        object.__setattr__(self, "weight", w)

    @property
    def n_voxels(self):
        return self.m_desired.shape[0]

    def select(self, idx):
        return TargetPattern(self.m_desired[idx], self.weight[idx])


@dataclass(frozen=True)
class LossSpec:
    kind: str = IV180
    lam: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")


def _check_shapes(m, target):
    m = np.asarray(m, dtype=float)
    if m.shape != target.m_desired.shape:
        raise ValidationError(
            f"magnetization shape {m.shape} does not match target {target.m_desired.shape}"
        )
    return m


def _power(rf, lam):
    rf = np.asarray(rf, dtype=complex)
    return lam * float(np.sum(np.abs(rf) ** 2)), 2 * lam * rf


def loss_ov90(m, target, rf, lam=0.0):
    """Weighted magnitude least squares on transverse magnetization plus RF power."""
    m = _check_shapes(m, target)
    w = target.weight
    mag = np.sqrt(m[:, 0] ** 2 + m[:, 1] ** 2 + MAG_EPS**2)
    mag_d = np.hypot(target.m_desired[:, 0], target.m_desired[:, 1])
    r = mag - mag_d
    fit = float(np.sum(w * r * r))
    dm = np.zeros_like(m)
    coef = 2 * w * r / mag
    dm[:, 0] = coef * m[:, 0]
    dm[:, 1] = coef * m[:, 1]
    power, d_rf = _power(rf, lam)
    return fit + power, dm, d_rf


def loss_iv180(m, target, rf, lam=0.0):
    """Weighted least squares on longitudinal magnetization plus RF power."""
    m = _check_shapes(m, target)
    w = target.weight
    r = m[:, 2] - target.m_desired[:, 2]
    fit = float(np.sum(w * r * r))
    dm = np.zeros_like(m)
    dm[:, 2] = 2 * w * r
    power, d_rf = _power(rf, lam)
    return fit + power, dm, d_rf


def evaluate_loss(spec, m, target, rf):
    fn = loss_ov90 if spec.kind == OV90 else loss_iv180
    return fn(m, target, rf, spec.lam)


def nrmse(m, target, kind, normalization="target"):
    """RMS error of the kind-relevant component over counted voxels.

    Only voxels with positive weight count. With ``normalization="target"``
    the RMS error is divided by the RMS of the target's component (transverse
    magnitude for OV90, M_z for IV180); ``"none"`` returns the plain RMSE.
    """
    kind = canonical_kind(kind)
    m = _check_shapes(m, target)
    keep = target.weight > 0
    if not np.any(keep):
        raise ValidationError("no counted voxels (all weights are zero)")
    md = target.m_desired[keep]
    mk = m[keep]
    if kind == OV90:
        ref = np.hypot(md[:, 0], md[:, 1])
        err = np.hypot(mk[:, 0], mk[:, 1]) - ref
    else:
        ref = md[:, 2]
        err = mk[:, 2] - ref
    rmse = np.sqrt(np.mean(err**2))
    if normalization == "none":
        return float(rmse)
    if normalization != "target":
        raise ValidationError(f"unknown normalization {normalization!r}")
    ref_rms = np.sqrt(np.mean(ref**2))
    if ref_rms == 0:
        raise ValidationError("target component is zero on all counted voxels; NRMSE undefined")
    return float(rmse / ref_rms)


# labels used by voxel-mask files
LABEL_OV, LABEL_IV, LABEL_DONT_CARE = 0, 1, 2


def _grid_spacing(positions):
    spacing = np.zeros(3)
    for ax in range(3):
        vals = np.unique(positions[:, ax])
        d = np.diff(vals)
        d = d[d > 1e-9]
        spacing[ax] = d.min() if d.size else 0.0
    return spacing


def cuboid_labels(positions, center, size, shell=0, spacing=None):
    """IV/OV/don't-care labels for an axis-aligned cuboid inner volume.

    ``shell`` OV voxels nearest the cuboid (measured in voxel steps along
    each axis) are labelled don't-care.
    """
    positions = np.asarray(positions, dtype=float)
    center = np.broadcast_to(np.asarray(center, dtype=float), (3,))
    half = np.broadcast_to(np.asarray(size, dtype=float), (3,)) / 2
    tol = 1e-9
    d = np.abs(positions - center)
    inside = np.all(d <= half + tol, axis=1)
    labels = np.where(inside, LABEL_IV, LABEL_OV)
    if shell > 0:
        if spacing is None:
            spacing = _grid_spacing(positions)
        grown = np.all(d <= half + shell * np.asarray(spacing) + tol, axis=1)
        labels[grown & ~inside] = LABEL_DONT_CARE
    return labels


def build_target(grid, pattern, *, labels=None, center=None, size=None, shell=0):
    """Target pattern for OV saturation or IV inversion.

    The geometry comes either from per-voxel ``labels`` (0 = OV, 1 = IV,
    2 = don't-care) or from a cuboid ``center``/``size`` in cm with an
    optional don't-care ``shell`` width in voxels. Voxels outside
    ``grid.mask`` get zero weight.

    For saturation, OV rows are ``[1, 0, 0]`` and IV rows ``[0, 0, 1]``; for
    inversion, OV rows are ``[0, 0, 1]`` and IV rows ``[0, 0, -1]``.
    """
    kind = canonical_kind(pattern)
    if labels is None:
        if center is None or size is None:
            raise ValidationError("build_target needs labels or a cuboid center and size")
        labels = cuboid_labels(grid.positions, center, size, shell)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.shape != (grid.n_voxels,):
        raise ValidationError(f"{labels.size} labels for {grid.n_voxels} voxels")
    if np.any((labels < 0) | (labels > 2)):
        raise ValidationError("labels must be 0 (OV), 1 (IV) or 2 (don't-care)")
    counted = grid.mask & (labels != LABEL_DONT_CARE)
    iv = labels == LABEL_IV
    ov = labels == LABEL_OV
    if not np.any(iv & counted):
        raise ValidationError("inner volume is empty")
    if not np.any(ov & counted):
        raise ValidationError("outer volume is empty")
    md = np.zeros((grid.n_voxels, 3))
    md[:, 2] = 1.0
    if kind == OV90:
        md[ov] = [1.0, 0.0, 0.0]
    else:
        md[iv] = [0.0, 0.0, -1.0]
    return TargetPattern(md, counted.astype(float))
