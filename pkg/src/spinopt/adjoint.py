"""Explicit backward pass through the Bloch simulation.

Given the cotangent ``h_{t+1} = dL/dm_{t+1}`` the recursion is::

    w       = E h_{t+1}
    h_t     = R_t^T w
    dL/dphi = w . (u x R_t m_t)
    dL/du   = phi * (c (m u^T + (m.u) I) + s [m]_x) w
    dL/dB   = gamma*dt/phi * (u u^T - I) dL/du - gamma*dt * dL/dphi * u

with ``c = (1 - cos phi)/phi`` and ``s = sin(phi)/phi``. The ``phi`` in
``dL/du`` cancels the ``1/phi`` factor, so the implementation never divides by
the rotation angle.

The derivative with respect to a complex RF sample packs the two real
partials as ``dL/dRe(b) + 1j * dL/dIm(b)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PhysicsConstants, Pulse, ValidationError
from .sim import _chunks, _decompose, _rotate, _run_chunks

__all__ = ["PulseGradient", "backstep", "backprop", "fd_check", "FDReport"]


@dataclass(frozen=True, eq=False)
class PulseGradient:
    """Loss gradient with respect to the RF (complex-packed) and gradient waveforms."""

    d_rf: np.ndarray
    d_grad: np.ndarray

    def __add__(self, other):
        return PulseGradient(self.d_rf + other.d_rf, self.d_grad + other.d_grad)

    def __mul__(self, a):
        return PulseGradient(a * self.d_rf, a * self.d_grad)

    __rmul__ = __mul__

    def as_vector(self):
        """Flat real vector ``[Re d_rf, Im d_rf, d_grad.ravel()]``."""
        return np.concatenate([self.d_rf.real, self.d_rf.imag, self.d_grad.ravel()])

    @classmethod
    def zeros(cls, n_samples):
        return cls(np.zeros(n_samples, complex), np.zeros((n_samples, 3)))


def _backstep(h_next, m, B, e1, e2, gamma_dt):
    """Vectorised backstep over the leading axes; returns ``(h_t, dL/dB_t)``."""
    u, phi, cp, sp, c, s, _ = _decompose(B, gamma_dt)
    w = np.empty_like(h_next)
    w[..., 0] = e2 * h_next[..., 0]
    w[..., 1] = e2 * h_next[..., 1]
    w[..., 2] = e1 * h_next[..., 2]
    # R^T is the rotation by -phi about the same axis
    h = _rotate(u, -phi, cp, -sp, -c, w)
    rm = _rotate(u, phi, cp, sp, c, m)
    dphi = np.einsum("...i,...i->...", w, np.cross(u, rm))
    uw = np.einsum("...i,...i->...", u, w)
    um = np.einsum("...i,...i->...", u, m)
    # q = dL/du / phi
    q = c[..., None] * (uw[..., None] * m + um[..., None] * w) + s[..., None] * np.cross(m, w)
    uq = np.einsum("...i,...i->...", u, q)
    dB = gamma_dt * ((uq - dphi)[..., None] * u - q)
    return h, dB


def backstep(h_next, m_t, rot_or_B, e1=1.0, e2=1.0, consts=PhysicsConstants()):
    """Adjoint of one forward step.

    ``rot_or_B`` is the B-effective (G) applied at this step; a
    :class:`~spinopt.sim.RotationDecomposition` is accepted too, in which
    case the field is rebuilt from it.
    Returns ``(h_t, dL/dB_t)``.
    """
    if hasattr(rot_or_B, "b_norm"):
        B = rot_or_B.u * np.asarray(rot_or_B.b_norm)[..., None]
    else:
        B = np.asarray(rot_or_B, dtype=float)
    h_next = np.asarray(h_next, dtype=float)
    m_t = np.asarray(m_t, dtype=float)
    return _backstep(
        h_next, m_t, B, np.asarray(e1, float), np.asarray(e2, float), consts.gamma * consts.dt
    )


def backprop(traj, dm_final, grid, pulse=None, consts=None, *, n_jobs=None, return_field_grad=False):
    """Propagate ``dL/dM_T`` back to the RF and gradient waveforms.

    Per-voxel field cotangents are reduced in a fixed chunk and voxel order,
    so the result is reproducible and independent of ``n_jobs``.
    """
    dm_final = np.asarray(dm_final, dtype=float)
    n_t = traj.n_steps
    n_m = grid.n_voxels
    if pulse is not None and pulse.n_samples != n_t:
        raise ValidationError(
            f"trajectory has {n_t} steps but pulse has {pulse.n_samples} samples"
        )
    if traj.states.shape[1] != n_m:
        raise ValidationError(f"trajectory has {traj.states.shape[1]} voxels, grid has {n_m}")
    if dm_final.shape != (n_m, 3):
        raise ValidationError(f"cotangent has shape {dm_final.shape}, expected ({n_m}, 3)")
    consts = traj.consts if consts is None else consts
    gamma_dt = consts.gamma * consts.dt
    positions = grid.positions
    dfield = np.empty((n_t, n_m, 3)) if return_field_grad else None

    def run(sl):
        d_rf = np.zeros(n_t, complex)
        d_grad = np.zeros((n_t, 3))
        h = dm_final[sl]
        e1, e2 = traj.e1[sl], traj.e2[sl]
        r = positions[sl]
        for t in range(n_t - 1, -1, -1):
            h, dB = _backstep(h, traj.states[t, sl], traj.fields[t, sl], e1, e2, gamma_dt)
            d_rf[t] = complex(dB[:, 0].sum(), dB[:, 1].sum())
            d_grad[t] = dB[:, 2] @ r
            if dfield is not None:
                dfield[t, sl] = dB
        return d_rf, d_grad

    parts = _run_chunks(run, n_m, n_jobs)
    d_rf = np.zeros(n_t, complex)
    d_grad = np.zeros((n_t, 3))
    for a, b in parts:
        d_rf += a
        d_grad += b
    out = PulseGradient(d_rf, d_grad)
    if return_field_grad:
        return out, dfield
    return out


@dataclass
class FDReport:
    """Outcome of a central-difference gradient comparison."""

    max_rel_error: float
    n_checked: int
    worst_index: int = -1
    analytic: np.ndarray = None
    numeric: np.ndarray = None
    indices: np.ndarray = None
    noise: np.ndarray = None
    raw_max_rel_error: float = 0.0

    noise_factor: float = 1.0

    @property
    def empty(self):
        return self.n_checked == 0

    @property
    def noise_units(self):
        """Largest ``|analytic - numeric|`` in units of ``eps * |L| / h``."""
        if self.empty:
            return 0.0
        unit = self.noise / self.noise_factor
        return float(np.max(np.abs(self.analytic - self.numeric) / unit))


def _perturb(pulse, k, delta):
    n = pulse.n_samples
    rf = np.array(pulse.rf)
    grad = np.array(pulse.grad)
    if k < n:
        rf[k] += delta
    elif k < 2 * n:
        rf[k - n] += 1j * delta
    else:
        j = k - 2 * n
        grad[j // 3, j % 3] += delta
    return Pulse(rf, grad, pulse.dt)


def relative_errors(analytic, numeric, floor=1e-3, noise=0.0):
    """Component-wise ``max(|a - n| - noise, 0) / max(|n|, floor * max|n|)``.

    ``noise`` is the round-off uncertainty of each difference quotient; the
    floor keeps components orders of magnitude below the gradient's scale
    from being judged on round-off alone.
    """
    analytic = np.asarray(analytic, float)
    numeric = np.asarray(numeric, float)
    if numeric.size == 0:
        return numeric
    scale = max(np.max(np.abs(numeric)), np.finfo(float).tiny)
    denom = np.maximum(np.abs(numeric), floor * scale)
    return np.maximum(np.abs(analytic - numeric) - noise, 0.0) / denom


def fd_check(loss_eval, pulse, h=1e-6, *, grad=None, samples=None, seed=0, floor=1e-3,
             noise_factor=8.0):
    """Compare an analytic pulse gradient against central differences.

    Parameters
    ----------
    loss_eval : callable
        ``loss_eval(pulse) -> float`` or ``-> (float, PulseGradient)``.
    pulse : Pulse
    h : float
        Finite-difference step in waveform units.
    grad : PulseGradient, optional
        Analytic gradient; taken from ``loss_eval(pulse)`` when omitted.
    samples : int, optional
        Number of components to check, drawn with ``seed``; all when omitted.
    noise_factor : float
        Cancellation error of a central difference is about
        ``eps * |L| / h``; this multiple of it is forgiven per component.
        ``raw_max_rel_error`` in the report ignores the allowance.
    """
    n = pulse.n_samples
    n_comp = 5 * n
    if n_comp == 0:
        return FDReport(0.0, 0)

    def value(p):
        out = loss_eval(p)
        return float(out[0] if isinstance(out, tuple) else out)

    if grad is None:
        out = loss_eval(pulse)
        if not isinstance(out, tuple):
            raise ValueError("loss_eval must return (value, PulseGradient) when grad is omitted")
        grad = out[1]
    vec = grad.as_vector()
    if samples is None or samples >= n_comp:
        idx = np.arange(n_comp)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n_comp, size=samples, replace=False))
    numeric = np.empty(idx.size)
    noise = np.empty(idx.size)
    eps = np.finfo(float).eps
    for j, k in enumerate(idx):
        fp, fm = value(_perturb(pulse, k, h)), value(_perturb(pulse, k, -h))
        numeric[j] = (fp - fm) / (2 * h)
        noise[j] = noise_factor * eps * max(abs(fp), abs(fm)) / h
    analytic = vec[idx]
    rel = relative_errors(analytic, numeric, floor, noise)
    raw = relative_errors(analytic, numeric, floor)
    worst = int(np.argmax(rel))
    return FDReport(
        float(rel[worst]), idx.size, int(idx[worst]), analytic, numeric, idx, noise, float(np.max(raw)),
        noise_factor,
    )
