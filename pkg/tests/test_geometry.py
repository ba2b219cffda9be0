import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import jacobian_fd_errors, left_perturbed_point
from vicet.geometry import (
    DTH,
    DX,
    TH0,
    X0,
    apply_state,
    euler_to_rotation,
    jacobian_block,
    make_state,
    pose_at_time,
    retract,
    rotation_to_euler,
    rotvec_to_rotation,
    skew,
    zero_distortion,
)

angle = st.floats(-np.pi, np.pi, allow_nan=False)
vec3 = st.tuples(*[st.floats(-10, 10, allow_nan=False)] * 3)


def test_identity_and_half_turn_roll():
    assert np.allclose(euler_to_rotation([0, 0, 0]), np.eye(3))
    assert np.allclose(euler_to_rotation([np.pi, 0, 0]), np.diag([1, -1, -1]))


def test_matches_scipy_intrinsic_zyx():
    rng = np.random.default_rng(0)
    for a in rng.uniform(-3, 3, (50, 3)):
        ref = Rotation.from_euler("ZYX", a[::-1]).as_matrix()
        assert np.allclose(euler_to_rotation(a), ref, atol=1e-13)


def test_vectorized_rotation():
    a = np.random.default_rng(1).uniform(-1, 1, (4, 5, 3))
    R = euler_to_rotation(a)
    assert R.shape == (4, 5, 3, 3)
    assert np.allclose(R[2, 3], euler_to_rotation(a[2, 3]))


@given(st.floats(-np.pi + 1e-6, np.pi), st.floats(-np.pi / 2 + 1e-4, np.pi / 2 - 1e-4), st.floats(-np.pi + 1e-6, np.pi))
def test_euler_round_trip(roll, pitch, yaw):
    a = np.array([roll, pitch, yaw])
    assert np.allclose(rotation_to_euler(euler_to_rotation(a)), a, atol=1e-8)


@given(angle, angle, angle)
def test_rotation_round_trip(roll, pitch, yaw):
    R = euler_to_rotation([roll, pitch, yaw])
    assert np.allclose(euler_to_rotation(rotation_to_euler(R)), R, atol=1e-9)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


def test_gimbal_lock_puts_everything_in_yaw():
    R = euler_to_rotation([0.4, np.pi / 2, 0.1])
    a = rotation_to_euler(R)
    assert a[0] == 0.0
    assert np.isclose(a[1], np.pi / 2)
    assert np.allclose(euler_to_rotation(a), R, atol=1e-9)


def test_yaw_of_minus_pi_is_reported_as_pi():
    assert np.isclose(rotation_to_euler(euler_to_rotation([0, 0, -np.pi]))[2], np.pi)


@given(vec3, vec3)
def test_skew_is_cross_product(a, b):
    assert np.allclose(skew(a) @ np.array(b), np.cross(a, b))
    assert np.allclose(skew(a), -skew(a).T)


def test_rodrigues_matches_scipy():
    for w in ([0.0, 0, 0], [1e-10, 0, 0], [0.3, -0.2, 1.1], [0, 0, np.pi]):
        assert np.allclose(rotvec_to_rotation(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


def test_make_state_layout():
    X = make_state(x0=(1, 2, 3), dx=(4, 5, 6), theta0=(7, 8, 9), dtheta=(10, 11, 12))
    assert X.tolist() == list(range(1, 13))
    with pytest.raises(ValueError):
        make_state(x0=(np.nan, 0, 0))


def test_pose_at_time_endpoints_and_lever_rule():
    X = make_state(x0=(1, 0, 0), dx=(0.5, 0, 0), theta0=(0.1, 0.2, 0.3), dtheta=(0, 0, -np.pi / 4))
    R0, m0 = pose_at_time(X, 0.0)
    R1, m1 = pose_at_time(X, 1.0)
    Rh, mh = pose_at_time(X, 0.5)
    assert np.allclose(R0, euler_to_rotation(X[TH0]))
    assert np.allclose(R1, euler_to_rotation(X[DTH]) @ R0)
    assert np.allclose(Rh, euler_to_rotation(X[DTH] / 2) @ R0)
    assert np.allclose(m1, [1.5, 0, 0]) and np.allclose(mh, [1.25, 0, 0]) and np.allclose(m0, X[X0])


def test_apply_state_batches():
    rng = np.random.default_rng(2)
    X = rng.normal(size=12) * 0.3
    p = rng.normal(size=(10, 3))
    s = rng.uniform(0, 1, 10)
    out = apply_state(p, s, X)
    for i in range(10):
        R, m = pose_at_time(X, s[i])
        assert np.allclose(out[i], R @ p[i] + m)


def test_zero_distortion():
    X = np.arange(12.0)
    Z = zero_distortion(X)
    assert np.all(Z[DX] == 0) and np.all(Z[DTH] == 0)
    assert np.all(Z[X0] == X[X0]) and np.all(Z[TH0] == X[TH0])


def test_jacobian_block_against_finite_differences():
    assert jacobian_fd_errors(100, seed=11).max() < 1e-6


def test_jacobian_broadcasts():
    rng = np.random.default_rng(3)
    mu = rng.normal(size=(7, 3))
    s = rng.uniform(size=7)
    m = rng.normal(size=(7, 3))
    J = jacobian_block(mu, s, m)
    assert J.shape == (7, 3, 12)
    assert np.allclose(J[4], jacobian_block(mu[4], s[4], m[4]))


@pytest.mark.parametrize("s", [0.0, 1.0])
def test_retract_matches_jacobian_at_sweep_ends(s):
    rng = np.random.default_rng(4)
    X = make_state(rng.normal(size=3), rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.2)
    p = rng.normal(size=3) * 8
    R, m = pose_at_time(X, s)
    J = jacobian_block(R @ p + m, s, m)
    h = 1e-6
    for k in range(12):
        e = np.zeros(12)
        e[k] = h
        fd = (apply_state(p, s, retract(X, e)) - apply_state(p, s, retract(X, -e))) / (2 * h)
        assert np.allclose(fd, J[:, k], atol=1e-7 * max(1.0, np.linalg.norm(J[:, k])))


def test_linearization_remainder_is_quadratic():
    rng = np.random.default_rng(5)
    X = make_state(rng.normal(size=3), rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.2)
    p, s = rng.normal(size=3) * 5, 0.37
    R, m = pose_at_time(X, s)
    J = jacobian_block(R @ p + m, s, m)
    d = rng.normal(size=12)
    base = R @ p + m
    rems = []
    for t in (1e-2, 5e-3):
        rems.append(np.linalg.norm(left_perturbed_point(X, p, s, t * d) - base - J @ (t * d)))
    assert rems[0] / rems[1] == pytest.approx(4.0, rel=0.05)


def test_retract_zero_is_identity():
    X = np.random.default_rng(6).normal(size=12) * 0.4
    assert np.allclose(retract(X, np.zeros(12)), X)
