import numpy as np
import pytest

from spinopt.model import GAMMA_H, HardwareLimits, Pulse, SpinGrid
from spinopt.sim import rotation_matrix
from spinopt.objective import TargetPattern

PAPER_LIMITS = HardwareLimits(b_max=0.25, g_max=5.0, s_max=12000.0)


def random_grid(rng, n_m, relax=True):
    pos = rng.uniform(-10, 10, size=(n_m, 3))
    offres = rng.normal(scale=200.0, size=n_m)
    if relax:
        t1 = rng.uniform(0.3, 2.0, n_m)
        t2 = t1 * rng.uniform(0.02, 0.5, n_m)
    else:
        t1 = t2 = np.inf
    return SpinGrid(pos, offres, t1, t2)


def random_pulse(rng, n_t, rf_scale=0.08, g_scale=0.3, dt=4e-6):
    rf = rf_scale * (rng.normal(size=n_t) + 1j * rng.normal(size=n_t))
    grad = g_scale * rng.normal(size=(n_t, 3))
    return Pulse(rf, grad, dt)


def random_target(rng, n_m):
    md = np.zeros((n_m, 3))
    inv = rng.random(n_m) < 0.5
    md[:, 2] = np.where(inv, -1.0, 1.0)
    sat = rng.random(n_m) < 0.3
    md[sat] = [1.0, 0.0, 0.0]
    weight = (rng.random(n_m) < 0.85).astype(float)
    weight[0] = 1.0
    return TargetPattern(md, weight)


def brute_force(grid, pulse, m0, gamma=GAMMA_H):
    """Explicit 3x3 Rodrigues matrices, composed one voxel and one step at a time."""
    dt = pulse.dt
    out = np.array(m0, dtype=float)
    for i in range(grid.n_voxels):
        e1 = np.exp(-dt / grid.t1[i])
        e2 = np.exp(-dt / grid.t2[i])
        E = np.diag([e2, e2, e1])
        e = np.array([0.0, 0.0, 1.0 - e1])
        m = out[i].copy()
        for t in range(pulse.n_samples):
            b = pulse.rf[t]
            B = np.array([b.real, b.imag, pulse.grad[t] @ grid.positions[i] + grid.offres[i] / gamma])
            nb = np.linalg.norm(B)
            R = np.eye(3) if nb == 0 else rotation_matrix(B / nb, -gamma * dt * nb)
            m = E @ R @ m + e
        out[i] = m
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


SMALL_CONFIG = {
    "grid": {"dims": [4, 4, 2], "fov_cm": [16, 16, 8], "t1_s": 1.0, "t2_s": 0.1},
    "limits": {"b_max_gauss": 0.25, "g_max_gauss_per_cm": 5.0, "s_max_gauss_per_cm_per_s": 12000.0},
    "loss": {"kind": "iv180", "lambda": 0.0},
    "target": {"geometry": "cuboid", "pattern": "iv-invert", "center_cm": [0, 0, 0], "size_cm": [8, 8, 4]},
    "init": {"source": "ktpoints", "n_points": 3, "dwell_s": 6e-5},
    "optimizer": {"n_outer": 1, "max_inner_iters": 3},
    "eval": {"perturbations": [{"gradient_delay": 1}]},
    "seed": 0,
}


@pytest.fixture
def small_config(tmp_path):
    """Write a quick-running design config and return its path."""
    import json

    def make(**changes):
        cfg = json.loads(json.dumps(SMALL_CONFIG))
        for key, value in changes.items():
            section, _, name = key.partition("__")
            if name:
                cfg[section][name] = value
            else:
                cfg[section] = value
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return path

    return make


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
