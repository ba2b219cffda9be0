"""Rotations, the 12-element motion state, and its linearization.

The state vector is a flat ``(12,)`` float array ordered
``[x0 (3), dx (3), theta0 (3), dtheta (3)]``: sensor position and Euler
angles at scan start, plus their change over one scan period. Euler angles
are ``(roll, pitch, yaw)`` with ``f(roll, pitch, yaw) = Rz(yaw) Ry(pitch) Rx(roll)``.

All functions broadcast over leading axes where that is cheap, since the
registration loop evaluates them for thousands of points per iteration.
"""

from __future__ import annotations

import numpy as np

X0 = slice(0, 3)
DX = slice(3, 6)
TH0 = slice(6, 9)
DTH = slice(9, 12)

# Columns of the rigid-only (6-state) subproblem inside the 12-state layout.
RIGID_COLUMNS = np.r_[0:3, 6:9]

_GIMBAL_EPS = 1e-10


def make_state(x0=(0, 0, 0), dx=(0, 0, 0), theta0=(0, 0, 0), dtheta=(0, 0, 0)) -> np.ndarray:
    """Assemble a state vector from its four 3-vectors."""
    X = np.concatenate([np.asarray(v, dtype=float).reshape(3) for v in (x0, dx, theta0, dtheta)])
    if not np.all(np.isfinite(X)):
        raise ValueError("state components must be finite")
    return X


def euler_to_rotation(angles) -> np.ndarray:
    """Rotation matrix ``Rz(yaw) @ Ry(pitch) @ Rx(roll)`` for ``(..., 3)`` angles."""
    a = np.asarray(angles, dtype=float)
    roll, pitch, yaw = a[..., 0], a[..., 1], a[..., 2]
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(a.shape[:-1] + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def _wrap_half_open(angle: float) -> float:
    # atan2 may return exactly -pi; the canonical range is (-pi, pi]
    return np.pi if angle <= -np.pi else angle


def rotation_to_euler(R) -> np.ndarray:
    """Inverse of :func:`euler_to_rotation` for a single 3x3 rotation.

    Returns roll and yaw in ``(-pi, pi]`` and pitch in ``[-pi/2, pi/2]``.
    At gimbal lock (``|pitch| = pi/2``) roll is set to zero and the whole
    rotation about the vertical is carried by yaw.
    """
    R = np.asarray(R, dtype=float)
    cos_pitch = np.hypot(R[0, 0], R[1, 0])
    pitch = np.arctan2(-R[2, 0], cos_pitch)
    if cos_pitch < _GIMBAL_EPS:
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([_wrap_half_open(roll), pitch, _wrap_half_open(yaw)])


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``. Broadcasts over ``(..., 3)``."""
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def rotvec_to_rotation(w) -> np.ndarray:
    """Rodrigues formula for a single rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)


def pose_at_time(X, s):
    """Sensor rotation and position at scaled time ``s``.

    Translation follows the lever rule ``x0 + s*dx``; rotation scales the
    change angles linearly, ``f(s*dtheta) @ f(theta0)``. ``s`` may be a scalar
    or an array, in which case the outputs gain a leading axis.
    """
    X = np.asarray(X, dtype=float)
    s = np.asarray(s, dtype=float)
    R0 = euler_to_rotation(X[TH0])
    Rd = euler_to_rotation(s[..., None] * X[DTH])
    R = Rd @ R0
    m = X[X0] + s[..., None] * X[DX]
    return R, m


def apply_state(p, s, X) -> np.ndarray:
    """Map body-frame measurement(s) ``p`` taken at time(s) ``s`` into the map frame."""
    p = np.asarray(p, dtype=float)
    R, m = pose_at_time(X, s)
    return np.einsum("...ij,...j->...i", R, p) + m


def jacobian_block(mu_mapframe, s_mid, translation) -> np.ndarray:
    """3x12 sensitivity of a mapped voxel mean to a state correction.

    ``mu_mapframe`` is the scan voxel mean already mapped through the current
    estimate and ``translation`` the sensor position at ``s_mid``; only the
    rotated lever arm ``mu_mapframe - translation`` enters the cross product.
    The rotation columns are derivatives with respect to a small rotation
    applied on the left, ``dtheta0 + s*ddtheta``, which is also how
    :func:`retract` folds a correction back into the state.

    Broadcasts: ``(J, 3)`` means with ``(J,)`` times give ``(J, 3, 12)``.
    """
    mu = np.asarray(mu_mapframe, dtype=float)
    s = np.asarray(s_mid, dtype=float)[..., None, None]
    P = skew(mu - np.asarray(translation, dtype=float))
    eye = np.broadcast_to(np.eye(3), P.shape)
    return np.concatenate([eye, s * eye, -P, -s * P], axis=-1)


def retract(X, delta) -> np.ndarray:
    """Fold a 12-element correction into a state (the ``X + dX`` update).

    Translations add. The start rotation is left-multiplied by the small
    rotation ``dtheta0``, and the change angles are re-derived so the
    end-of-scan rotation is left-multiplied by ``dtheta0 + ddtheta``. This
    keeps :func:`jacobian_block` exact at ``s = 0`` and ``s = 1``.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(delta, dtype=float)
    out = X.copy()
    out[X0] += d[X0]
    out[DX] += d[DX]
    R0 = euler_to_rotation(X[TH0])
    R1 = euler_to_rotation(X[DTH]) @ R0
    R0_new = rotvec_to_rotation(d[TH0]) @ R0
    R1_new = rotvec_to_rotation(d[TH0] + d[DTH]) @ R1
    out[TH0] = rotation_to_euler(R0_new)
    out[DTH] = rotation_to_euler(R1_new @ R0_new.T)
    return out


def zero_distortion(X) -> np.ndarray:
    """Copy of ``X`` with the change states cleared (rigid interpretation)."""
    out = np.array(X, dtype=float)
    out[DX] = 0.0
    out[DTH] = 0.0
    return out
