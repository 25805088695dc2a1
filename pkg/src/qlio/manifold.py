"""Manifold arithmetic for the navigation state R3 x SO(3) x R9 x S2.

Rotations are stored as unit quaternions ``(w, x, y, z)``. The error state is
a 17-vector ordered ``(dt, dtheta, dv, dba, dbw, dg)`` where ``dg`` lives in the
two-dimensional tangent chart of the gravity sphere spanned by ``b_matrix``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qlio.errors import DegenerateGravityError

GRAVITY_MAGNITUDE = 9.81
ERROR_DIM = 17

# slices into the error state
T_SL = slice(0, 3)
TH_SL = slice(3, 6)
V_SL = slice(6, 9)
BA_SL = slice(9, 12)
BW_SL = slice(12, 15)
G_SL = slice(15, 17)

_SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Return the matrix ``S`` with ``S @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(theta) -> np.ndarray:
    """Rodrigues exponential of a rotation vector, as a 3x3 matrix."""
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    """Principal logarithm of a rotation matrix (norm <= pi).

    Goes through the quaternion so the angle-near-pi case picks its axis from
    the largest diagonal entry instead of dividing by ``sin(angle)``.
    """
    return quat_log(quat_from_matrix(R))


def so3_right_jacobian(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    a = float(np.linalg.norm(theta))
    K = skew(theta)
    if a < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    return np.eye(3) - (1.0 - np.cos(a)) / (a * a) * K + (a - np.sin(a)) / (a**3) * (K @ K)


def so3_right_jacobian_inv(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    a = float(np.linalg.norm(theta))
    K = skew(theta)
    if a < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    c = 1.0 / (a * a) - (1.0 + np.cos(a)) / (2.0 * a * np.sin(a))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def quat_from_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (R[0, 0], R[1, 1], R[2, 2])
    if tr >= max(diag):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(diag))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def matrix_from_quat(q) -> np.ndarray:
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def quat_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_exp(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    if angle < _SMALL_ANGLE:
        q = np.array([1.0, 0.5 * theta[0], 0.5 * theta[1], 0.5 * theta[2]])
        return q / np.linalg.norm(q)
    s = np.sin(0.5 * angle) / angle
    return np.array([np.cos(0.5 * angle), s * theta[0], s * theta[1], s * theta[2]])


def quat_log(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    v = q[1:]
    vn = float(np.linalg.norm(v))
    if vn < _SMALL_ANGLE:
        return 2.0 * v / q[0]
    angle = 2.0 * np.arctan2(vn, q[0])
    return angle * v / vn


def quat_slerp(q0, q1, alpha: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    if np.dot(q0, q1) < 0.0:
        q1 = -q1
    dq = quat_multiply(quat_conjugate(q0), q1)
    return quat_multiply(q0, quat_exp(alpha * quat_log(dq)))


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def b_matrix(g) -> np.ndarray:
    """3x2 orthonormal basis of the tangent plane of the gravity sphere at ``g``."""
    g = np.asarray(g, dtype=float)
    n = float(np.linalg.norm(g))
    if n <= 0.0:
        raise DegenerateGravityError("gravity vector has zero length")
    gx, gy, gz = g / n
    den = 1.0 + gz
    if den < 1e-12:
        raise DegenerateGravityError("gravity direction (0, 0, -1) is singular for the tangent chart")
    return np.array(
        [
            [1.0 - gx * gx / den, -gx * gy / den],
            [-gx * gy / den, 1.0 - gy * gy / den],
            [-gx, -gy],
        ]
    )


def rotation_between(a, b) -> np.ndarray:
    """Rotation vector of the shortest rotation taking direction ``a`` onto ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    c = np.cross(a, b)
    s = float(np.linalg.norm(c))
    cs = float(np.dot(a, b))
    if s < 1e-15:
        if cs > 0.0:
            return c
        raise DegenerateGravityError("antipodal gravity vectors have no unique connecting rotation")
    return np.arctan2(s, cs) / s * c


def gravity_boxplus(g, dg) -> np.ndarray:
    return so3_exp(b_matrix(g) @ np.asarray(dg, dtype=float)) @ np.asarray(g, dtype=float)


def gravity_boxminus(g1, g0) -> np.ndarray:
    """Chart coordinates ``dg`` at ``g0`` such that ``gravity_boxplus(g0, dg) == g1``."""
    return b_matrix(g0).T @ rotation_between(g0, g1)


@dataclass
class NavState:
    """Nominal navigation state: position, attitude, velocity, biases, gravity."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, GRAVITY_MAGNITUDE]))

    def __post_init__(self):
        self.t = np.array(self.t, dtype=float)
        self.q = np.array(self.q, dtype=float)
        self.v = np.array(self.v, dtype=float)
        self.ba = np.array(self.ba, dtype=float)
        self.bw = np.array(self.bw, dtype=float)
        self.g = np.array(self.g, dtype=float)

    @property
    def R(self) -> np.ndarray:
        return matrix_from_quat(self.q)

    def copy(self) -> NavState:
        return NavState(self.t, self.q, self.v, self.ba, self.bw, self.g)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.t, self.q, self.v, self.ba, self.bw, self.g))


def state_boxplus(x: NavState, dx) -> NavState:
    dx = np.asarray(dx, dtype=float)
    q = quat_multiply(x.q, quat_exp(dx[TH_SL]))
    q /= np.linalg.norm(q)
    return NavState(
        t=x.t + dx[T_SL],
        q=q,
        v=x.v + dx[V_SL],
        ba=x.ba + dx[BA_SL],
        bw=x.bw + dx[BW_SL],
        g=gravity_boxplus(x.g, dx[G_SL]),
    )


def state_boxminus(x1: NavState, x0: NavState) -> np.ndarray:
    """Error state ``dx`` with ``state_boxplus(x0, dx) == x1``."""
    dx = np.empty(ERROR_DIM)
    dx[T_SL] = x1.t - x0.t
    dx[TH_SL] = quat_log(quat_multiply(quat_conjugate(x0.q), x1.q))
    dx[V_SL] = x1.v - x0.v
    dx[BA_SL] = x1.ba - x0.ba
    dx[BW_SL] = x1.bw - x0.bw
    dx[G_SL] = gravity_boxminus(x1.g, x0.g)
    return dx
