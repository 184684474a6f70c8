"""SE(3) rigid transforms, tangent-space maps, and rigid point-set alignment.

Conventions:
    - Rotations are stored as unit quaternions (x, y, z, w); the matrix view
      is computed on demand.
    - Tangent vectors are 6-vectors (wx, wy, wz, vx, vy, vz): rotation part
      first (radians), translation part second (meters).
    - ``apply(T, p) = R p + t``; ``compose(a, b)`` applies ``b`` then ``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle, Taylor expansions replace the exact trig forms.
_SMALL_ANGLE = 1e-10

# Relative singular-value floor for a usable point configuration.
_DEGENERACY_RTOL = 1e-10


class DegenerateGeometryError(ValueError):
    """Point configuration too thin (or too small) for a unique alignment."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = math.sqrt(float(q @ q))
    if n < 1e-15:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # Canonical sign keeps round trips and file output deterministic.
    if q[3] < 0.0:
        q = -q
    return q


def _quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    px, py, pz, pw = p
    qx, qy, qz, qw = q
    return np.array([
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
        pw * qw - px * qx - py * qy - pz * qz,
    ])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    t = np.trace(R)
    if t > 0.0:
        s = 0.5 / math.sqrt(t + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s,
                      (R[1, 0] - R[0, 1]) * s,
                      0.25 / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s,
                      (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s,
                      (R[1, 0] - R[0, 1]) / s])
    return _quat_normalize(q)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from a rotation vector (Rodrigues' formula)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    return (np.eye(3)
            + (math.sin(theta) / theta) * K
            + ((1.0 - math.cos(theta)) / theta**2) * (K @ K))


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector from a rotation matrix; angle in [0, pi]."""
    cos_theta = max(-1.0, min(1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    if theta < _SMALL_ANGLE:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if math.pi - theta < 1e-7:
        # Angle at (or numerically at) pi: axis sign is not unique.
        # Return a valid representative from the symmetric part.
        A = (R + np.eye(3)) / 2.0  # = axis axis^T at theta == pi
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / math.sqrt(max(A[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        return axis * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return axis * (theta / (2.0 * math.sin(theta)))


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3)
            + ((1.0 - math.cos(theta)) / theta**2) * K
            + ((theta - math.sin(theta)) / theta**3) * (K @ K))


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = theta / 2.0
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * (K @ K)


class Rotation:
    """Element of SO(3), quaternion-backed with a matrix view."""

    __slots__ = ("_q",)

    def __init__(self, quaternion: np.ndarray):
        self._q = _quat_normalize(np.asarray(quaternion, dtype=float))

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([0.0, 0.0, 0.0, 1.0]))

    @staticmethod
    def from_matrix(R: np.ndarray) -> "Rotation":
        return Rotation(_matrix_to_quat(np.asarray(R, dtype=float)))

    @staticmethod
    def from_rotvec(w: np.ndarray) -> "Rotation":
        w = np.asarray(w, dtype=float)
        theta = float(np.linalg.norm(w))
        if theta < _SMALL_ANGLE:
            return Rotation(np.concatenate([0.5 * w, [1.0]]))
        axis = w / theta
        return Rotation(np.concatenate([axis * math.sin(theta / 2.0),
                                        [math.cos(theta / 2.0)]]))

    @property
    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w), w >= 0."""
        return self._q.copy()

    @property
    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self._q)

    def rotvec(self) -> np.ndarray:
        return so3_log(self.matrix)

    def inverse(self) -> "Rotation":
        x, y, z, w = self._q
        return Rotation(np.array([-x, -y, -z, w]))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(_quat_multiply(self._q, other._q))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(p, dtype=float)

    def __repr__(self) -> str:
        return f"Rotation(q={self._q})"


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: rotation plus translation (meters)."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_parts(R: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return RigidTransform(Rotation.from_matrix(R), t)

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation.matrix
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        Rinv = self.rotation.inverse()
        return RigidTransform(Rinv, -Rinv.apply(self.translation))

    def __repr__(self) -> str:
        return f"RigidTransform(t={self.translation}, q={self.rotation.quaternion})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a . b (apply b first, then a)."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation.apply(b.translation) + a.translation)


def apply_to_point(T: RigidTransform, p: np.ndarray) -> np.ndarray:
    """R p + t."""
    return T.rotation.apply(p) + T.translation


def apply_to_points(T: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply T to an (n, 3) array of points."""
    points = np.asarray(points, dtype=float)
    return points @ T.rotation.matrix.T + T.translation


def se3_exp(delta: np.ndarray) -> RigidTransform:
    """Exponential map from a (wx, wy, wz, vx, vy, vz) tangent vector."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    w, v = delta[:3], delta[3:]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ v
    return RigidTransform(Rotation.from_matrix(R), t)


def se3_log(T: RigidTransform) -> np.ndarray:
    """Logarithm map; inverse of se3_exp for rotation angle < pi."""
    w = so3_log(T.rotation.matrix)
    v = _so3_left_jacobian_inv(w) @ T.translation
    return np.concatenate([w, v])


def procrustes_align(points_a: np.ndarray, points_b: np.ndarray) -> RigidTransform:
    """Closed-form rigid alignment: argmin_T sum_j ||a_j - T . b_j||^2.

    Centroid subtraction followed by SVD of the 3x3 cross-covariance, with
    the determinant-sign fix so the result is always a proper rotation.

    Raises:
        DegenerateGeometryError: fewer than 3 points ("underdetermined
            alignment") or near-collinear configuration ("degenerate
            configuration").
    """
    A = np.asarray(points_a, dtype=float).reshape(-1, 3)
    B = np.asarray(points_b, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError("point lists must have equal lengths")
    m = A.shape[0]
    if m < 3:
        raise DegenerateGeometryError("underdetermined alignment: need >= 3 points")

    ca = A.mean(axis=0)
    cb = B.mean(axis=0)
    H = (B - cb).T @ (A - ca)

    U, S, Vt = np.linalg.svd(H)
    if S[1] < _DEGENERACY_RTOL * S[0] or S[0] == 0.0:
        raise DegenerateGeometryError("degenerate configuration: points near-collinear")

    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = ca - R @ cb
    return RigidTransform(Rotation.from_matrix(R), t)


def alignment_cost(T: RigidTransform, points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Sum of squared residuals ||a_j - T . b_j||^2."""
    resid = np.asarray(points_a, float) - apply_to_points(T, points_b)
    return float(np.sum(resid * resid))
