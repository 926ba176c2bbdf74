"""Rotation and extended-pose primitives (SO(3) and SE_2(3)).

The low-level ``_``-prefixed functions are numba kernels operating on raw
arrays so the filter loop can call them without Python overhead. The public
wrappers accept anything array-like.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

THETA_SMALL = 1e-7


@njit(cache=True)
def _skew(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit(cache=True)
def _exp_coeffs(theta, theta_small):
    # sin(t)/t, (1 - cos t)/t^2, (t - sin t)/t^3
    if theta < theta_small:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    s = np.sin(theta)
    # half-angle form: 1 - cos(t) cancels catastrophically just above theta_small
    h = np.sin(0.5 * theta) / theta
    return s / theta, 2.0 * h * h, (theta - s) / (t2 * theta)


@njit(cache=True)
def _exp_so3(phi, theta_small=THETA_SMALL):
    theta = np.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    c1, c2, _ = _exp_coeffs(theta, theta_small)
    K = _skew(phi)
    return np.eye(3) + c1 * K + c2 * (K @ K)


@njit(cache=True)
def _left_jacobian_so3(phi, theta_small=THETA_SMALL):
    theta = np.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    _, c2, c3 = _exp_coeffs(theta, theta_small)
    K = _skew(phi)
    return np.eye(3) + c2 * K + c3 * (K @ K)


@njit(cache=True)
def _exp_se23(xi, theta_small=THETA_SMALL):
    phi = xi[0:3].copy()
    R = _exp_so3(phi, theta_small)
    J = _left_jacobian_so3(phi, theta_small)
    return R, J @ xi[3:6], J @ xi[6:9]


@njit(cache=True)
def _log_so3(R):
    cos_t = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    theta = np.arctan2(0.5 * np.sqrt(w @ w), cos_t)
    if theta < 1e-6:
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    if np.pi - theta < 1e-3:
        # near pi the antisymmetric part vanishes; the axis comes from the symmetric part
        M = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
        k = np.argmax(np.array([M[0, 0], M[1, 1], M[2, 2]]))
        axis = M[:, k] / np.sqrt(M[k, k])
        if axis @ w < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


@njit(cache=True)
def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0.0:
        U[:, 2] = -U[:, 2]
        Q = U @ Vt
    return Q


def skew(v) -> np.ndarray:
    """Return the 3x3 matrix ``S`` such that ``S @ w == np.cross(v, w)``."""
    return _skew(np.asarray(v, dtype=float))


def exp_so3(phi, theta_small: float = THETA_SMALL) -> np.ndarray:
    """Rodrigues exponential of a rotation vector (rad)."""
    return _exp_so3(np.asarray(phi, dtype=float), theta_small)


def log_so3(R) -> np.ndarray:
    """Rotation vector of ``R``. Trace is clamped before ``arccos``."""
    return _log_so3(np.asarray(R, dtype=float))


def rotation_angle(R) -> float:
    """Angle (rad) of the rotation ``R``, clamped trace formula."""
    R = np.asarray(R, dtype=float)
    return float(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)))


def orthonormalize(R) -> np.ndarray:
    """Closest rotation matrix to ``R`` (polar projection)."""
    return _orthonormalize(np.asarray(R, dtype=float))


@dataclass(frozen=True)
class ExtendedPose:
    """Element of SE_2(3): attitude, velocity and position packed together."""

    rotation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray

    @classmethod
    def identity(cls) -> "ExtendedPose":
        return cls(np.eye(3), np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, X) -> "ExtendedPose":
        X = np.asarray(X, dtype=float)
        return cls(X[:3, :3].copy(), X[:3, 3].copy(), X[:3, 4].copy())

    def as_matrix(self) -> np.ndarray:
        X = np.eye(5)
        X[:3, :3] = self.rotation
        X[:3, 3] = self.velocity
        X[:3, 4] = self.position
        return X

    def inverse(self) -> "ExtendedPose":
        Rt = self.rotation.T
        return ExtendedPose(Rt, -Rt @ self.velocity, -Rt @ self.position)


def exp_se23(xi, theta_small: float = THETA_SMALL) -> ExtendedPose:
    """Closed-form exponential of a 9-vector ``[xi_R, xi_v, xi_p]``."""
    R, v, p = _exp_se23(np.asarray(xi, dtype=float), theta_small)
    return ExtendedPose(R, v, p)


def log_se23(X: ExtendedPose) -> np.ndarray:
    """Inverse of :func:`exp_se23`; test plumbing only."""
    phi = _log_so3(X.rotation)
    Jinv = np.linalg.inv(_left_jacobian_so3(phi, THETA_SMALL))
    return np.concatenate([phi, Jinv @ X.velocity, Jinv @ X.position])


def hat_se23(xi) -> np.ndarray:
    """5x5 Lie-algebra matrix of a 9-vector."""
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((5, 5))
    A[:3, :3] = _skew(xi[:3])
    A[:3, 3] = xi[3:6]
    A[:3, 4] = xi[6:9]
    return A


def compose(a: ExtendedPose, b: ExtendedPose) -> ExtendedPose:
    """Group product ``a * b``."""
    return ExtendedPose(
        a.rotation @ b.rotation,
        a.rotation @ b.velocity + a.velocity,
        a.rotation @ b.position + a.position,
    )


def euler_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def rotation_to_euler(R) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation`, returns ``(roll, pitch, yaw)``."""
    R = np.asarray(R, dtype=float)
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return float(roll), float(pitch), float(yaw)
