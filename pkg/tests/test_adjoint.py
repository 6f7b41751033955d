import numpy as np
import pytest

from spinopt.adjoint import PulseGradient, backprop, backstep, fd_check, relative_errors
from spinopt.model import PhysicsConstants, Pulse, SpinGrid, ValidationError
from spinopt.objective import LossSpec, evaluate_loss
from spinopt.sim import EPS_PHI, decompose, simulate, step

from conftest import random_grid, random_pulse, random_target


def loss_fn(grid, target, spec):
    def run(p):
        m, traj = simulate(grid, p)
        value, dm, d_rf = evaluate_loss(spec, m, target, p.rf)
        pg = backprop(traj, dm, grid, p)
        return value, pg + PulseGradient(d_rf, np.zeros_like(pg.d_grad))

    return run


@pytest.mark.parametrize("kind", ["iv180", "ov90"])
def test_backprop_matches_finite_differences(rng, kind):
    grid = random_grid(rng, 8)
    target = random_target(rng, 8)
    pulse = random_pulse(rng, 16)
    report = fd_check(loss_fn(grid, target, LossSpec(kind, 0.3)), pulse, 1e-6)
    assert report.n_checked == 80
    assert report.max_rel_error < 1e-5


def test_backstep_matches_jacobian_of_step(rng):
    consts = PhysicsConstants()
    for _ in range(10):
        m = rng.normal(size=3)
        B = rng.normal(size=3) * 0.05
        h = rng.normal(size=3)
        e1, e2 = 0.99, 0.9
        h_t, dB = backstep(h, m, B, e1, e2, consts)
        eps = 1e-6
        jm = np.empty(3)
        jb = np.empty(3)
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            jm[i] = h @ (step(m + d, decompose(B), e1, e2) - step(m - d, decompose(B), e1, e2)) / (2 * eps)
            jb[i] = h @ (step(m, decompose(B + d), e1, e2) - step(m, decompose(B - d), e1, e2)) / (2 * eps)
        np.testing.assert_allclose(h_t, jm, atol=1e-8)
        np.testing.assert_allclose(dB, jb, rtol=1e-6, atol=1e-8)


def test_backstep_accepts_decomposition(rng):
    m, B, h = rng.normal(size=(3, 3))
    a = backstep(h, m, B)
    b = backstep(h, m, decompose(B))
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_backstep_zero_field_is_transpose_of_relaxation():
    h, dB = backstep([1.0, 2.0, 3.0], [0.3, 0.1, 0.9], np.zeros(3), 0.5, 0.25)
    np.testing.assert_allclose(h, [0.25, 0.5, 1.5], atol=1e-15)
    assert np.all(np.isfinite(dB))


def test_backstep_transpose_consistency(rng):
    # <h, R w> == <R^T h, w> with no relaxation
    for _ in range(10):
        B = rng.normal(size=3) * 0.1
        h = rng.normal(size=3)
        w = rng.normal(size=3)
        ht, _ = backstep(h, np.zeros(3), B)
        rw = step(w, decompose(B))
        assert h @ rw == pytest.approx(ht @ w, abs=1e-12)


def test_backstep_near_eps_phi_seam(rng):
    m = rng.normal(size=3)
    h = rng.normal(size=3)
    gdt = PhysicsConstants().gamma * PhysicsConstants().dt
    u = np.array([0.3, -0.4, np.sqrt(1 - 0.25)])
    below = backstep(h, m, u * (0.5 * EPS_PHI / gdt))
    above = backstep(h, m, u * (2.0 * EPS_PHI / gdt))
    np.testing.assert_allclose(below[0], above[0], atol=1e-9)
    np.testing.assert_allclose(below[1], above[1], rtol=1e-6, atol=1e-9)


def test_backprop_zero_cotangent(rng):
    grid = random_grid(rng, 5)
    pulse = random_pulse(rng, 7)
    _, traj = simulate(grid, pulse)
    pg = backprop(traj, np.zeros((5, 3)), grid, pulse)
    assert np.all(pg.d_rf == 0) and np.all(pg.d_grad == 0)


def test_backprop_is_linear_in_cotangent(rng):
    grid = random_grid(rng, 5)
    pulse = random_pulse(rng, 7)
    _, traj = simulate(grid, pulse)
    a, b = rng.normal(size=(2, 5, 3))
    ga, gb = backprop(traj, a, grid), backprop(traj, b, grid)
    gab = backprop(traj, 2 * a - 3 * b, grid)
    np.testing.assert_allclose(gab.as_vector(), (2 * ga + (-3) * gb).as_vector(), atol=1e-12)


def test_backprop_origin_voxel_has_no_gradient_sensitivity(rng):
    grid = SpinGrid(np.zeros((1, 3)), offres=50.0, t1=1.0, t2=0.1)
    pulse = random_pulse(rng, 10)
    _, traj = simulate(grid, pulse)
    pg = backprop(traj, rng.normal(size=(1, 3)), grid, pulse)
    assert np.all(pg.d_grad == 0)
    assert np.any(pg.d_rf != 0)


def test_backprop_empty_pulse(rng):
    grid = random_grid(rng, 3)
    _, traj = simulate(grid, Pulse.zeros(0))
    pg = backprop(traj, np.ones((3, 3)), grid)
    assert pg.d_rf.shape == (0,) and pg.d_grad.shape == (0, 3)


def test_backprop_field_gradients(rng):
    grid = random_grid(rng, 4)
    pulse = random_pulse(rng, 6)
    _, traj = simulate(grid, pulse)
    pg, dfield = backprop(traj, rng.normal(size=(4, 3)), grid, return_field_grad=True)
    np.testing.assert_allclose(pg.d_rf.real, dfield[:, :, 0].sum(1), atol=1e-14)
    np.testing.assert_allclose(pg.d_grad, dfield[:, :, 2] @ grid.positions, atol=1e-12)


def test_backprop_shape_checks(rng):
    grid = random_grid(rng, 4)
    _, traj = simulate(grid, random_pulse(rng, 6))
    with pytest.raises(ValidationError):
        backprop(traj, np.zeros((3, 3)), grid)
    with pytest.raises(ValidationError):
        backprop(traj, np.zeros((4, 3)), grid, random_pulse(rng, 5))


def test_backprop_independent_of_threads(rng, monkeypatch):
    import spinopt.sim as sim

    monkeypatch.setattr(sim, "CHUNK_SIZE", 2)
    grid = random_grid(rng, 9)
    pulse = random_pulse(rng, 5)
    _, traj = simulate(grid, pulse)
    dm = rng.normal(size=(9, 3))
    a = backprop(traj, dm, grid, n_jobs=1).as_vector()
    b = backprop(traj, dm, grid, n_jobs=3).as_vector()
    np.testing.assert_array_equal(a, b)


def test_fd_check_quadratic():
    pulse = Pulse(np.array([0.1 + 0.2j, -0.3j]), np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]))

    def quad(p):
        v = np.sum(np.abs(p.rf) ** 2) + np.sum(p.grad**2)
        return v, PulseGradient(2 * p.rf, 2 * p.grad)

    report = fd_check(quad, pulse)
    assert report.n_checked == 10
    assert report.max_rel_error < 1e-8


def test_fd_check_detects_wrong_gradient():
    pulse = Pulse(np.array([0.1 + 0.2j]), np.array([[1.0, 2.0, 3.0]]))
    report = fd_check(lambda p: float(np.sum(p.grad**2)), pulse, grad=PulseGradient.zeros(1) + PulseGradient(np.zeros(1, complex), np.ones((1, 3))))
    assert report.max_rel_error > 0.1


def test_fd_check_sampling_and_empty(rng):
    grid = random_grid(rng, 3)
    target = random_target(rng, 3)
    f = loss_fn(grid, target, LossSpec("iv180", 0.0))
    report = fd_check(f, random_pulse(rng, 6), samples=7, seed=1)
    assert report.n_checked == 7 and len(set(report.indices)) == 7
    assert fd_check(f, Pulse.zeros(0)).empty


def test_relative_error_floor():
    rel = relative_errors([1.0, 1e-9], [1.0, 0.0])
    assert rel[0] == 0.0
    assert rel[1] == pytest.approx(1e-6)


def test_fd_check_catches_small_gradient_errors(rng):
    grid = random_grid(rng, 8)
    target = random_target(rng, 8)
    pulse = random_pulse(rng, 16)
    f = loss_fn(grid, target, LossSpec("iv180", 0.0))
    good = fd_check(f, pulse)
    assert good.max_rel_error < 1e-5 and good.noise_units < 8
    g = f(pulse)[1]
    k = int(np.argmax(np.abs(g.d_grad)))
    bad_grad = np.array(g.d_grad)
    bad_grad.flat[k] *= 1 + 1e-4
    report = fd_check(f, pulse, grad=PulseGradient(g.d_rf, bad_grad))
    assert report.max_rel_error > 5e-5
