"""Quaternion, SO(3) and SE(3) primitives.

Quaternions are stored as arrays ``[w, x, y, z]``. Most functions accept a
leading batch dimension so that the spline code can evaluate thousands of
windows in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# below this angle the trig ratios switch to Taylor expansions
SMALL_ANGLE = 1e-8
# principal-branch limit for logarithms of relative poses
LOG_BRANCH_LIMIT = np.pi - 1e-6


class LogBranchError(ValueError):
    """Raised when a logarithm is requested at or beyond the principal branch."""


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


# --------------------------------------------------------------------------
# Quaternions
# --------------------------------------------------------------------------

def quat_identity(shape=()):
    q = np.zeros(tuple(shape) + (4,))
    q[..., 0] = 1.0
    return q


def quat_mul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_exp(w):
    """Unit quaternion rotating by ``|w|`` radians about ``w / |w|``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, second-order series near zero
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * w], axis=-1)


def quat_log(q):
    """Principal-branch axis-angle vector of a unit quaternion.

    ``q`` and ``-q`` give the same result.
    """
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    # theta / sin(theta/2) with theta = 2 atan2(n, w)
    k = np.where(
        small,
        2.0 / safe_w * (1.0 - n * n / (3.0 * safe_w * safe_w)),
        2.0 * np.arctan2(n, w) / safe_n,
    )
    return k[..., None] * v


def quat_to_rotmat(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotmat_to_quat(R):
    """Shepperd's method; returns the quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    # pick the numerically largest of the four candidates per matrix
    case = np.argmax(np.stack([tr, m00, m11, m22], axis=-1), axis=-1)
    s = 2.0 * np.sqrt(np.maximum(1.0 + np.stack([
        tr, m00 - m11 - m22, m11 - m00 - m22, m22 - m00 - m11], axis=-1), 1e-300))
    s = s[np.arange(len(m)), case]
    d21 = m[:, 2, 1] - m[:, 1, 2]
    d02 = m[:, 0, 2] - m[:, 2, 0]
    d10 = m[:, 1, 0] - m[:, 0, 1]
    s01 = m[:, 0, 1] + m[:, 1, 0]
    s02 = m[:, 0, 2] + m[:, 2, 0]
    s12 = m[:, 1, 2] + m[:, 2, 1]
    cands = np.stack([
        np.stack([0.25 * s, d21 / s, d02 / s, d10 / s], axis=-1),
        np.stack([d21 / s, 0.25 * s, s01 / s, s02 / s], axis=-1),
        np.stack([d02 / s, s01 / s, 0.25 * s, s12 / s], axis=-1),
        np.stack([d10 / s, s02 / s, s12 / s, 0.25 * s], axis=-1),
    ], axis=1)
    q = cands[np.arange(len(m)), case]
    q = np.where(q[:, :1] < 0.0, -q, q)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q.reshape(R.shape[:-2] + (4,))


def quat_rotate(q, v):
    """Rotate vectors ``v`` by unit quaternions ``q``."""
    qv = np.concatenate([np.zeros(np.shape(v)[:-1] + (1,)), v], axis=-1)
    return quat_mul(quat_mul(q, qv), quat_conj(q))[..., 1:]


def sign_continuous(quats):
    """Flip signs so that consecutive quaternions have non-negative dot products."""
    q = np.array(quats, dtype=float)
    for k in range(1, len(q)):
        if np.dot(q[k - 1], q[k]) < 0.0:
            q[k] = -q[k]
    return q


# --------------------------------------------------------------------------
# SO(3) helpers on matrices
# --------------------------------------------------------------------------

def so3_exp(w):
    return quat_to_rotmat(quat_exp(w))


def so3_log(R):
    return quat_log(rotmat_to_quat(R))


def so3_left_jacobian(phi):
    """V(phi) = sum_k [phi]^k / (k+1)!, the translation factor of the SE(3) exponential."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (safe - np.sin(safe)) / (safe ** 3))
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    c = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        (1.0 - 0.5 * safe * np.sin(safe) / (1.0 - np.cos(safe))) / (safe * safe),
    )
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + c[..., None, None] * (K @ K)


# --------------------------------------------------------------------------
# SE(3)
# --------------------------------------------------------------------------

@dataclass
class Twist:
    """se(3) element: translation part ``v`` and axis-angle part ``omega``."""

    v: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)

    def as_vector(self):
        return np.concatenate([self.v, self.omega])


@dataclass
class Pose:
    """Rigid transform mapping body coordinates to the global frame."""

    R: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.p = np.asarray(self.p, dtype=float).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.p)

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return Pose(self.R @ other.R, self.R @ other.p + self.p)
        x = np.asarray(other, dtype=float)
        return x @ self.R.T + self.p


def se3_exp(xi: Twist, theta: float = 1.0) -> Pose:
    """Exponential of ``xi * theta``.

    ``xi.omega`` may have any length; it is normalised to a unit axis with its
    magnitude folded into ``theta`` before the closed-form screw expression is
    applied.
    """
    w = xi.omega
    n = float(np.linalg.norm(w))
    if n < SMALL_ANGLE:
        # pure translation, second-order correction for the residual rotation
        phi = w * theta
        R = so3_exp(phi)
        p = (np.eye(3) + 0.5 * skew(phi)) @ (xi.v * theta)
        return Pose(R, p)
    axis = w / n
    v = xi.v / n
    angle = n * theta
    R = so3_exp(axis * angle)
    K = skew(axis)
    p = (np.eye(3) - R) @ (K @ v) + np.outer(axis, axis) @ v * angle
    return Pose(R, p)


def se3_log(T: Pose) -> Twist:
    """Twist ``xi`` with ``se3_exp(xi, 1) == T``; ``|omega|`` is the rotation angle."""
    phi = so3_log(T.R)
    angle = float(np.linalg.norm(phi))
    if angle >= LOG_BRANCH_LIMIT:
        raise LogBranchError("log branch boundary: rotation angle %.9f rad" % angle)
    v = so3_left_jacobian_inv(phi) @ T.p
    return Twist(v, phi)


# batched variants used by the spline kernels; xi = (..., 6) ordered (v, omega)

def se3_exp_batch(xi):
    xi = np.asarray(xi, dtype=float)
    phi = xi[..., 3:]
    R = so3_exp(phi)
    p = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), xi[..., :3])
    return R, p


def se3_log_batch(R, p):
    phi = so3_log(R)
    v = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), p)
    return np.concatenate([v, phi], axis=-1)
