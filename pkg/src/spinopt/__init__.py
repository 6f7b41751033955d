"""Joint RF and gradient waveform design for 3D tailored MR excitation.

The package simulates discrete-time Bloch dynamics, back-propagates loss
gradients through the simulation with an explicit adjoint, keeps RF and
slew limits satisfied through a change of variables, and optimises the
waveforms with L-BFGS.
"""

from importlib.resources import files

from .adjoint import PulseGradient, backprop, backstep, fd_check
from .constraint import DesignVariables, chain_to_vars, check_gmax, decode, encode
from .estimator import PulseDesigner
from .model import (
    GAMMA_H,
    HardwareLimits,
    PhysicsConstants,
    Pulse,
    SpinGrid,
    ValidationError,
    beff,
    validate_grid,
)
from .objective import LossSpec, TargetPattern, build_target, loss_iv180, loss_ov90, nrmse
from .optim import DesignProblem, alternating_design, lbfgs_minimize, simultaneous_design
from .sim import decompose, simulate, step

__version__ = "0.1.0"


def toy_config_path():
    """Path of the bundled 8x8x4 inversion design config."""
    return files(__name__) / "data" / "toy_iv180.json"


__all__ = [
    "GAMMA_H", "HardwareLimits", "PhysicsConstants", "Pulse", "SpinGrid", "ValidationError",
    "beff", "validate_grid", "decompose", "simulate", "step", "PulseGradient", "backprop",
    "backstep", "fd_check", "DesignVariables", "chain_to_vars", "check_gmax", "decode",
    "encode", "LossSpec", "TargetPattern", "build_target", "loss_iv180", "loss_ov90", "nrmse",
    "DesignProblem", "alternating_design", "lbfgs_minimize", "simultaneous_design",
    "PulseDesigner", "toy_config_path",
]
