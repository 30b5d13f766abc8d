from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from trajdyn.control import (Box, CareConvergenceError, LqrController, PdAttitudeController, PidController,
                             arm_pid_box, care_residual, controller_factory, decode_params, encode_params,
                             lqr_from_multipliers, pd_attitude_action, pid_action, quad_pd_box, sample_lqr_variants,
                             solve_care)
from trajdyn.envs import ArmParams, CartpoleParams, arm_step, cartpole_linearize

Q_CP = np.diag([0.5, 0.05, 1.0, 0.05])


def test_care_scalar_zero_dynamics():
    P, K = solve_care([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert K[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_care_scalar_unstable():
    P, K = solve_care([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(1 + math.sqrt(2), abs=1e-10)
    assert K[0, 0] == pytest.approx(2.4142135623730951, abs=1e-10)


def test_care_cartpole_residual_and_stability():
    A, B = cartpole_linearize(CartpoleParams())
    P, K = solve_care(A, B, Q_CP, np.eye(1))
    assert np.linalg.norm(care_residual(A, B, Q_CP, np.eye(1), P), "fro") < 1e-8
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0
    # independent solver via the Hamiltonian Schur route
    P_ref = scipy.linalg.solve_continuous_are(A, B, Q_CP, np.eye(1))
    np.testing.assert_allclose(P, P_ref, rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("seed", range(8))
def test_care_random_systems_match_reference(seed):
    rng = np.random.default_rng(seed)
    n, m = 3 + seed % 3, 1 + seed % 2
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    G = rng.normal(size=(n, n))
    Q = G @ G.T + 0.1 * np.eye(n)
    R = np.eye(m) * rng.uniform(0.5, 2)
    P, K = solve_care(A, B, Q, R)
    assert np.linalg.norm(care_residual(A, B, Q, R, P), "fro") < 1e-8 * max(1, np.linalg.norm(P))
    np.testing.assert_allclose(P, scipy.linalg.solve_continuous_are(A, B, Q, R), rtol=1e-7, atol=1e-8)
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0


@given(st.floats(0.01, 100))
def test_lqr_scaling_invariance(c):
    A, B = cartpole_linearize(CartpoleParams())
    P1, K1 = solve_care(A, B, Q_CP, np.eye(1))
    P2, K2 = solve_care(A, B, c * Q_CP, c * np.eye(1))
    np.testing.assert_allclose(K2, K1, rtol=1e-7)
    np.testing.assert_allclose(P2, c * P1, rtol=1e-7)


def test_care_iteration_cap_reports_residual():
    A, B = cartpole_linearize(CartpoleParams())
    with pytest.raises(CareConvergenceError) as info:
        solve_care(A, B, Q_CP, np.eye(1), max_iter=1)
    assert info.value.residual >= 0


# --------------------------------------------------------------------------- LQR sampling


def test_lqr_action_is_minus_K_s():
    K = np.array([[1.0, 2.0, 3.0, 4.0]])
    s = np.array([0.1, -0.2, 0.3, 0.5])
    np.testing.assert_array_equal(LqrController(K).act(s), -K @ s)


def test_lqr_multiplier_identities():
    K = np.array([[-0.7, -1.4, -28.0, -6.0]])
    np.testing.assert_array_equal(lqr_from_multipliers(K, np.ones(4)).gain, K)
    np.testing.assert_array_equal(lqr_from_multipliers(K, np.full(4, 0.5)).gain, 0.5 * K)
    np.testing.assert_array_equal(lqr_from_multipliers(K, [2.0]).gain, 2.0 * K)


def test_sample_lqr_variants_statistics():
    K = np.array([[-0.7, -1.4, -28.0, -6.0]])
    vs = sample_lqr_variants(K, 10_000, np.random.default_rng(0))
    ms = np.array([v.params for v in vs])
    assert np.all((ms >= 0.5) & (ms <= 1.5))
    assert np.max(np.abs(ms.mean(axis=0) - 1.0)) < 0.01
    np.testing.assert_array_equal(vs[7].gain, ms[7] * K)
    with pytest.raises(ValueError):
        sample_lqr_variants(K, 0, np.random.default_rng(0))


# --------------------------------------------------------------------------- PID / PD


def _pid(c, z, dz):
    return pid_action(c, np.asarray(z, float), np.asarray(dz, float))


def test_pid_zero_error_zero_torque():
    c = PidController(np.array([0.3, -0.2]), np.array([2.0, 2.0]), np.array([0.5, 0.5]))
    np.testing.assert_array_equal(_pid(c, [0.3, -0.2], [0, 0]), 0.0)


def test_pid_magnitude_and_sign():
    c = PidController(np.zeros(1), np.array([2.0]), np.zeros(1))
    u = _pid(c, [0.5], [0.0])
    assert abs(u[0]) == pytest.approx(1.0)
    assert u[0] < 0


def test_pid_saturation():
    c = PidController(np.zeros(2), np.array([100.0, 100.0]), np.zeros(2), torque_limit=10.0)
    np.testing.assert_array_equal(_pid(c, [0.5, -0.5], [0, 0]), [-10.0, 10.0])


def test_pid_integral_gain_is_zero():
    c = PidController.from_params(np.arange(6.0))
    np.testing.assert_array_equal(c.ki, 0.0)
    np.testing.assert_array_equal(c.params, np.arange(6.0))
    with pytest.raises(ValueError):
        _pid(c, [0.0], [0.0])


def test_pid_reduces_error_on_arm():
    p = ArmParams(gravity=0.0)
    target = np.array([0.4, -0.3])
    c = PidController(target, np.array([0.5, 0.5]), np.zeros(2))
    s = np.array([0.0, 0.0, 0.0, 0.0])
    for _ in range(5):
        s = arm_step(s, c.act(s), p)
    assert np.all(np.abs(s[[0, 2]] - target) < np.abs(target))


def test_pd_level_is_hover():
    u = pd_attitude_action([0.3, 0.02, 0.3, 0.02], (0.0, 0.0), (0.0, 0.0), hover=0.45)
    np.testing.assert_array_equal(u, [0.45] * 4)


def test_pd_roll_error_is_differential_on_roll_pair():
    u = pd_attitude_action([0.3, 0.02, 0.3, 0.02], (0.1, 0.0), (0.0, 0.0), hover=0.45)
    assert u[0] == u[2] == pytest.approx(0.45)
    # positive roll needs negative roll torque: motor 4 (-y) up, motor 2 (+y) down
    assert u[1] < 0.45 < u[3]


def test_pd_controller_acts_on_observation():
    pd = PdAttitudeController(np.array([0.3, 0.02, 0.3, 0.02]), 0.45)
    u = pd.act(np.array([0.0, 0.1, 0.0, 0.0, 0.0]))
    assert u[1] == u[3] == pytest.approx(0.45) and u[2] < u[0]


def test_box_edges_encode_to_unit():
    b = quad_pd_box()
    np.testing.assert_array_equal(encode_params(b.lo, b), -1.0)
    np.testing.assert_array_equal(encode_params(b.hi, b), 1.0)


# --------------------------------------------------------------------------- encoding


def test_encode_examples():
    assert encode_params([1.0], Box((0.0,), (2.0,)))[0] == 0.0
    assert encode_params([1.5], Box((0.5,), (1.5,)))[0] == 1.0


def test_encode_decode_rejections():
    b = Box((0.0,), (1.0,))
    with pytest.raises(ValueError):
        decode_params([1.5], b)
    with pytest.raises(ValueError):
        encode_params([2.0], b)
    with pytest.raises(ValueError):
        Box((1.0,), (0.0,))


def test_roundtrip_1000_random_vectors():
    rng = np.random.default_rng(1)
    b = arm_pid_box()
    th = b.sample(rng, 1000)
    back = decode_params(encode_params(th, b), b)
    assert np.max(np.abs(back - th)) < 1e-12


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.lists(st.tuples(st.floats(-50, 50), st.floats(1e-3, 50)), min_size=3, max_size=3))
def test_encode_decode_bijection(x, bounds):
    lo = tuple(b[0] for b in bounds)
    hi = tuple(b[0] + b[1] for b in bounds)
    b = Box(lo, hi)
    x = np.array(x)
    assert np.max(np.abs(encode_params(decode_params(x, b), b) - x)) < 1e-9


def test_controller_factory_kinds():
    K = np.array([[-1.0, -2.0, -3.0, -4.0]])
    assert isinstance(controller_factory(None, "lqr_scalar", K)([1.0]), LqrController)
    assert isinstance(controller_factory(None, "pid")(np.zeros(6)), PidController)
    assert isinstance(controller_factory(None, "pd_attitude", hover=0.4)(np.ones(4)), PdAttitudeController)
    with pytest.raises(ValueError):
        controller_factory(None, "mystery")
