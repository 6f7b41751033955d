"""Estimator-style front end to the pulse design drivers.

``PulseDesigner`` follows the scikit-learn conventions: hyper-parameters are
constructor arguments (so ``get_params``/``set_params``/``clone`` work),
``fit`` learns a pulse for a spin grid and a target, and fitted attributes
carry a trailing underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import (
    DT_DEFAULT,
    GAMMA_H,
    HardwareLimits,
    PhysicsConstants,
    Pulse,
    SpinGrid,
    ValidationError,
    check_grid,
)
from .objective import LossSpec, TargetPattern, nrmse
from .initpulse import InitSpec, make_initial_pulse
from .optim import DesignProblem, LbfgsOptions, design
from .sim import simulate

__all__ = ["PulseDesigner", "check_grid_target", "check_pulse"]


def check_grid_target(grid, target):
    """Validate a grid/target pair and return them."""
    if not isinstance(grid, SpinGrid):
        raise TypeError(f"expected a SpinGrid, got {type(grid).__name__}")
    if not isinstance(target, TargetPattern):
        raise TypeError(f"expected a TargetPattern, got {type(target).__name__}")
    check_grid(grid)
    if target.n_voxels != grid.n_voxels:
        raise ValidationError(
            f"target has {target.n_voxels} voxels but the grid has {grid.n_voxels}"
        )
    if not np.any(target.weight[grid.mask] > 0):
        raise ValidationError("no voxel is both inside the mask and counted by the target")
    return grid, target


def check_pulse(pulse, dt=None):
    if not isinstance(pulse, Pulse):
        raise TypeError(f"expected a Pulse, got {type(pulse).__name__}")
    if dt is not None and not np.isclose(pulse.dt, dt, rtol=1e-12, atol=0):
        raise ValidationError(f"pulse dt {pulse.dt} differs from dt {dt}")
    return pulse


class PulseDesigner(BaseEstimator):
    """Joint RF and gradient design by alternating (or simultaneous) L-BFGS.

    Parameters
    ----------
    loss : {"iv180", "ov90"}
        Longitudinal inversion loss or transverse magnitude least squares.
    lam : float
        Weight of the RF power penalty.
    b_max, g_max, s_max : float
        Hardware limits in G, G/cm and G/cm/s.
    gamma, dt : float
        Gyromagnetic ratio (rad/s/G) and sample period (s).
    n_outer : int
        Outer iterations.
    mode : {"alternating", "simultaneous"}
    memory, max_inner_iters : int
        L-BFGS memory and steps per block.
    init : {"ktpoints", "file"} or Pulse
        Where the starting waveforms come from.
    n_points, dwell, init_path :
        Options of the chosen initializer.
    n_jobs : int, optional
        Worker threads for the voxel loop.
    random_state : int
        Seed of the initializer.

    Attributes
    ----------
    pulse_ : Pulse
    init_pulse_ : Pulse
    history_ : list of dict
        One row per block of each outer iteration.
    accepted_losses_ : list of float
        Loss after every accepted L-BFGS step, starting with the initial loss.
    loss_, nrmse_ : float
    """

    def __init__(
        self,
        loss="iv180",
        lam=0.0,
        b_max=0.25,
        g_max=5.0,
        s_max=12000.0,
        gamma=GAMMA_H,
        dt=DT_DEFAULT,
        n_outer=10,
        mode="alternating",
        memory=10,
        max_inner_iters=20,
        init="ktpoints",
        n_points=5,
        dwell=2e-4,
        init_path=None,
        n_jobs=None,
        random_state=0,
    ):
        self.loss = loss
        self.lam = lam
        self.b_max = b_max
        self.g_max = g_max
        self.s_max = s_max
        self.gamma = gamma
        self.dt = dt
        self.n_outer = n_outer
        self.mode = mode
        self.memory = memory
        self.max_inner_iters = max_inner_iters
        self.init = init
        self.n_points = n_points
        self.dwell = dwell
        self.init_path = init_path
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _settings(self):
        return (
            LossSpec(self.loss, self.lam),
            HardwareLimits(self.b_max, self.g_max, self.s_max),
            PhysicsConstants(self.gamma, self.dt),
        )

    def _initial_pulse(self, grid, target, loss, limits, consts):
        if isinstance(self.init, Pulse):
            return check_pulse(self.init, consts.dt)
        spec = InitSpec(
            source=self.init, path=self.init_path, n_points=self.n_points,
            dwell=self.dwell, seed=self.random_state,
        )
        return make_initial_pulse(spec, grid, target, loss.kind, limits, consts)

    def fit(self, grid, target):
        """Design a pulse for ``grid`` that drives it towards ``target``."""
        grid, target = check_grid_target(grid, target)
        loss, limits, consts = self._settings()
        init_pulse = self._initial_pulse(grid, target, loss, limits, consts)
        problem = DesignProblem(
            grid, target, loss, limits, init_pulse, consts,
            n_outer=self.n_outer, mode=self.mode,
            lbfgs=LbfgsOptions(memory=self.memory, max_iter=self.max_inner_iters),
            n_jobs=self.n_jobs,
        )
        result = design(problem)
        self.init_pulse_ = init_pulse
        self.result_ = result
        self.pulse_ = result.pulse
        self.history_ = result.history
        self.accepted_losses_ = result.accepted
        self.loss_ = result.loss
        self.nrmse_ = result.nrmse
        return self

    def predict(self, grid, m0=None):
        """Magnetization at the end of the designed pulse, shape ``(n_M, 3)``."""
        check_is_fitted(self, "pulse_")
        check_grid(grid)
        m, _ = simulate(grid, self.pulse_, m0, PhysicsConstants(self.gamma, self.dt), n_jobs=self.n_jobs)
        return m

    def score(self, grid, target):
        """Negative NRMSE of the designed pulse (higher is better)."""
        grid, target = check_grid_target(grid, target)
        return -nrmse(self.predict(grid), target, self.loss)
