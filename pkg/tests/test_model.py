import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinopt.model import (
    GAMMA_H,
    HardwareLimits,
    PhysicsConstants,
    Pulse,
    SpinGrid,
    ValidationError,
    beff,
    beff_all,
    validate_grid,
)

from conftest import random_grid


def test_constants_defaults():
    c = PhysicsConstants()
    assert c.gamma == pytest.approx(2 * np.pi * 4257.6)
    assert c.dt == 4e-6


@pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"gamma": -1.0}, {"dt": 0.0}, {"dt": np.nan}])
def test_constants_reject_nonpositive(kw):
    with pytest.raises(ValidationError):
        PhysicsConstants(**kw)


@pytest.mark.parametrize("bad", [(0, 5, 12000), (0.25, -5, 12000), (0.25, 5, 0)])
def test_limits_must_be_positive(bad):
    with pytest.raises(ValidationError):
        HardwareLimits(*bad)


def test_beff_zero_fields():
    grid = SpinGrid(np.random.default_rng(0).normal(size=(6, 3)))
    np.testing.assert_array_equal(beff(0, np.zeros(3), grid), np.zeros((6, 3)))


def test_beff_rf_magnitude():
    grid = SpinGrid(np.zeros((3, 3)))
    np.testing.assert_array_equal(beff(0.25 + 0j, np.zeros(3), grid), np.tile([0.25, 0, 0], (3, 1)))


def test_beff_gradient_inner_product():
    grid = SpinGrid([[2.0, 0.0, 0.0]])
    np.testing.assert_allclose(beff(0, [1.0, 0, 0], grid), [[0, 0, 2.0]])


def test_beff_offres_only_third_component_exact():
    grid = SpinGrid(np.ones((4, 3)), offres=[0.0, 100.0, -250.0, 3e3])
    out = beff(0.1 - 0.2j, np.zeros(3), grid)
    np.testing.assert_array_equal(out[:, 2], grid.offres / GAMMA_H)
    np.testing.assert_array_equal(out[:, :2], np.tile([0.1, -0.2], (4, 1)))


def test_beff_rejects_nonfinite():
    grid = SpinGrid(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        beff(np.nan, np.zeros(3), grid)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-3, 3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
)
def test_beff_affine_in_waveforms(a, re, im, g):
    grid = random_grid(np.random.default_rng(1), 5)
    b0 = beff(0, np.zeros(3), grid)
    bx = beff(complex(re, im), g, grid) - b0
    bax = beff(a * complex(re, im), a * np.asarray(g), grid) - b0
    np.testing.assert_allclose(bax, a * bx, atol=1e-12)


def test_beff_all_matches_per_sample(rng):
    grid = random_grid(rng, 7)
    p = Pulse(rng.normal(size=5) + 1j * rng.normal(size=5), rng.normal(size=(5, 3)))
    allb = beff_all(p, grid)
    for t in range(5):
        np.testing.assert_allclose(allb[t], beff(p.rf[t], p.grad[t], grid), rtol=0, atol=1e-14)


def test_validate_grid_ok(rng):
    assert validate_grid(random_grid(rng, 10)) == []


def test_validate_grid_t2_exceeds_t1():
    problems = validate_grid(SpinGrid(np.zeros((1, 3)), t1=1.0, t2=2.0))
    assert len(problems) == 1 and "t2 exceeds t1" in problems[0]


def test_validate_grid_nan_position_names_voxel():
    pos = np.zeros((4, 3))
    pos[2, 1] = np.nan
    problems = validate_grid(SpinGrid(pos))
    assert any("voxel 2" in p for p in problems)


def test_validate_grid_nonpositive_relaxation():
    problems = validate_grid(SpinGrid(np.zeros((2, 3)), t1=[1.0, -1.0], t2=[0.0, 0.05]))
    assert any("voxel 0: t2" in p for p in problems)
    assert any("voxel 1: t1" in p for p in problems)


def test_grid_is_immutable(rng):
    grid = random_grid(rng, 3)
    with pytest.raises(ValueError):
        grid.positions[0, 0] = 1.0


def test_regular_grid_layout():
    g = SpinGrid.regular((4, 2, 1), (8, 4, 1))
    assert g.n_voxels == 8
    np.testing.assert_allclose(np.unique(g.positions[:, 0]), [-3, -1, 1, 3])
    np.testing.assert_allclose(np.unique(g.positions[:, 1]), [-1, 1])


def test_pulse_length_mismatch():
    with pytest.raises(ValidationError):
        Pulse(np.zeros(3), np.zeros((4, 3)))


def test_pulse_nonfinite():
    with pytest.raises(ValidationError):
        Pulse([np.inf], np.zeros((1, 3)))
