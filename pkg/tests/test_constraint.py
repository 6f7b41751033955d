import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spinopt.adjoint import PulseGradient
from spinopt.constraint import (
    ARCTAN,
    DesignVariables,
    SlewOperator,
    TanhSquash,
    chain_to_vars,
    check_gmax,
    decode,
    decoded_slew,
    encode,
    ramp_down,
)
from spinopt.model import HardwareLimits, Pulse, ValidationError

from conftest import PAPER_LIMITS

DT = 4e-6
finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_arctan_examples():
    assert ARCTAN.value(0.0) == 0.0
    assert ARCTAN.value(1.0) == pytest.approx(0.5, abs=1e-15)
    assert ARCTAN.inverse(0.9) == pytest.approx(6.313751514675, rel=1e-12)
    assert ARCTAN.value(1e12) < 1.0


def test_decode_examples():
    v = DesignVariables([0.0, 1.0], [0.0, np.pi / 2], np.zeros((2, 3)))
    p = decode(v, PAPER_LIMITS, DT)
    assert p.rf[0] == 0
    assert p.rf[1] == pytest.approx(0.125j, abs=1e-15)
    assert np.all(p.grad == 0)


def test_decode_accumulates_slew():
    s = np.zeros((3, 3))
    s[:, 0] = 1.0  # half of s_max
    p = decode(DesignVariables(np.zeros(3), np.zeros(3), s), PAPER_LIMITS, DT)
    np.testing.assert_allclose(p.grad[:, 0], 6000 * DT * np.arange(1, 4), rtol=1e-14)


def test_encode_decode_round_trip(rng):
    rf = 0.2 * np.exp(1j * rng.uniform(-np.pi, np.pi, 30)) * rng.random(30)
    grad = np.cumsum(rng.uniform(-0.9, 0.9, (30, 3)) * 12000 * DT, axis=0)
    p = Pulse(rf, grad, DT)
    q = decode(encode(p, PAPER_LIMITS), PAPER_LIMITS, DT)
    np.testing.assert_allclose(q.rf, p.rf, atol=1e-12)
    np.testing.assert_allclose(q.grad, p.grad, atol=1e-12)


def test_encode_rejects_infeasible():
    with pytest.raises(ValidationError, match="sample 1"):
        encode(Pulse([0.1, 0.25], np.zeros((2, 3)), DT), PAPER_LIMITS)
    g = np.zeros((2, 3))
    g[1, 2] = 12000 * DT
    with pytest.raises(ValidationError, match="axis z"):
        encode(Pulse(np.zeros(2), g, DT), PAPER_LIMITS)


@settings(max_examples=100, deadline=None)
@given(arrays(float, (8,), elements=finite), arrays(float, (8,), elements=finite),
       arrays(float, (8, 3), elements=finite))
def test_decode_always_feasible(rho, theta, s):
    v = DesignVariables(rho, theta, s)
    p = decode(v, PAPER_LIMITS, DT)
    assert np.all(np.abs(p.rf) <= PAPER_LIMITS.b_max * (1 + 4 * np.finfo(float).eps))
    assert np.all(np.abs(decoded_slew(v, PAPER_LIMITS)) <= PAPER_LIMITS.s_max)


@settings(max_examples=100, deadline=None)
@given(arrays(float, (6,), elements=st.floats(-0.99, 0.99)), arrays(float, (6,), elements=st.floats(-3, 3)),
       arrays(float, (6, 3), elements=st.floats(-0.99, 0.99)))
def test_round_trip_property(mag, phase, slew_frac):
    rf = PAPER_LIMITS.b_max * mag * np.exp(1j * phase)
    grad = SlewOperator(DT).inverse(slew_frac * PAPER_LIMITS.s_max)
    p = Pulse(rf, grad, DT)
    q = decode(encode(p, PAPER_LIMITS), PAPER_LIMITS, DT)
    assert np.max(np.abs(q.rf - p.rf)) < 1e-9
    assert np.max(np.abs(q.grad - p.grad)) < 1e-9


def test_squash_monotone():
    x = np.linspace(-50, 50, 10001)
    for sq in (ARCTAN, TanhSquash()):
        assert np.all(np.diff(sq.value(x)) >= 0)
        assert np.all(sq.derivative(x) >= 0)


def test_slew_operator_pair(rng):
    op = SlewOperator(DT)
    g = rng.normal(size=(7, 3))
    np.testing.assert_allclose(op.inverse(op.apply(g)), g, atol=1e-13)
    np.testing.assert_allclose(op.matrix(7) @ g, op.apply(g), rtol=1e-12)
    a, b = rng.normal(size=(2, 7, 3))
    assert np.sum(op.inverse(a) * b) == pytest.approx(np.sum(a * op.adjoint_inverse(b)), rel=1e-12)


@pytest.mark.parametrize("squash", [ARCTAN, TanhSquash()])
def test_chain_to_vars_matches_fd(rng, squash):
    n = 5
    v = DesignVariables(rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 3)))
    c_rf = rng.normal(size=n) + 1j * rng.normal(size=n)
    c_g = rng.normal(size=(n, 3))

    def f(x):
        p = decode(v.with_vector(x), PAPER_LIMITS, DT, squash)
        return np.sum(c_rf.real * p.rf.real + c_rf.imag * p.rf.imag) + np.sum(c_g * p.grad)

    analytic = chain_to_vars(PulseGradient(c_rf, c_g), v, PAPER_LIMITS, DT, squash).to_vector()
    x0 = v.to_vector()
    numeric = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = 1e-6
        numeric[i] = (f(x0 + e) - f(x0 - e)) / 2e-6
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


def test_variable_blocks_round_trip(rng):
    v = DesignVariables(rng.normal(size=4), rng.normal(size=4), rng.normal(size=(4, 3)))
    for blocks in (("rf",), ("grad",), ("rf", "grad")):
        w = v.with_vector(v.to_vector(blocks), blocks)
        np.testing.assert_array_equal(w.to_vector(), v.to_vector())


def test_variables_validated():
    with pytest.raises(ValidationError):
        DesignVariables([0.0], [0.0, 1.0], np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        DesignVariables([np.nan], [0.0], np.zeros((1, 3)))


def test_check_gmax():
    g = np.zeros((3, 3))
    g[1, 0] = 5.1
    report = check_gmax(Pulse(np.zeros(3), g, DT), PAPER_LIMITS)
    assert not report.ok
    with pytest.raises(ValidationError, match="axis x"):
        report.raise_if_violated()
    g[1, 0] = 5.0
    assert check_gmax(Pulse(np.zeros(3), g, DT), PAPER_LIMITS).ok


def test_ramp_down():
    g = np.zeros((2, 3))
    g[-1] = [1.0, -0.5, 0.2]
    p = ramp_down(Pulse(np.array([0.1, 0.1]), g, DT), PAPER_LIMITS)
    assert np.all(p.grad[-1] == 0)
    assert np.all(p.rf[2:] == 0)
    assert np.max(np.abs(np.diff(p.grad[1:], axis=0))) / DT <= 0.9 * PAPER_LIMITS.s_max * (1 + 1e-12)
    q = Pulse(np.array([0.1]), np.zeros((1, 3)), DT)
    assert ramp_down(q, PAPER_LIMITS) is q


def test_limits_validation():
    with pytest.raises(ValidationError):
        HardwareLimits(0.0, 5.0, 12000.0)
