"""Nonlinear least-squares SLAM core.

Variables are SE(3) poses and 3D point landmarks with class labels; factors
are a gauge prior, relative-pose odometry, and pinhole pixel observations.
Batch Gauss-Newton with step halving, sparse Cholesky-style marginal
recovery (selected columns, never the dense inverse), and locally-computed
per-frame landmark marginals used by the compatibility metric.

Pose tangent convention matches ``geometry``: (wx, wy, wz, vx, vy, vz),
rotation first. Pose updates are right-multiplicative, T <- T . Exp(delta).
Information matrices in factors use the same ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import (
    RigidTransform,
    Rotation,
    se3_log,
    skew,
    so3_exp,
    _so3_left_jacobian,
    _so3_left_jacobian_inv,
)

GAUGE_INFO = 1e12  # exact-style prior stiffness used for gauge fixing

_MIN_DEPTH = 1e-6  # camera points at or behind this depth make the cost infinite


class GaugeObservabilityError(RuntimeError):
    """Normal equations are rank deficient (gauge or observability failure)."""


class UnknownVariableError(KeyError):
    """Query referenced a pose or landmark id not present in the graph."""


# ---------------------------------------------------------------------------
# variables and factors
# ---------------------------------------------------------------------------


@dataclass
class PoseVariable:
    id: int
    estimate: RigidTransform


@dataclass
class LandmarkVariable:
    id: int
    position: np.ndarray
    class_label: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    body_to_camera: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of a camera-frame point (z > 0) to pixels."""
        return np.array([self.fx * p_cam[0] / p_cam[2] + self.cx,
                         self.fy * p_cam[1] / p_cam[2] + self.cy])

    def in_image(self, pixel: np.ndarray) -> bool:
        return (0.0 <= pixel[0] <= self.width) and (0.0 <= pixel[1] <= self.height)


def _check_information(info: np.ndarray, dim: int) -> np.ndarray:
    info = np.asarray(info, dtype=float).reshape(dim, dim)
    if np.abs(info - info.T).max() > 1e-12 * max(1.0, np.abs(info).max()):
        raise ValueError("information matrix must be symmetric")
    if np.linalg.eigvalsh(info).min() < -1e-9:
        raise ValueError("information matrix must be positive semidefinite")
    return 0.5 * (info + info.T)


@dataclass
class OdometryFactor:
    from_pose: int
    to_pose: int
    measured: RigidTransform
    information: np.ndarray

    def __post_init__(self):
        self.information = _check_information(self.information, 6)


@dataclass
class ObservationFactor:
    pose_id: int
    landmark_id: int
    pixel: np.ndarray
    information: np.ndarray
    camera: CameraModel | None = None

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        self.information = _check_information(self.information, 2)


@dataclass
class PriorFactor:
    pose_id: int
    mean: RigidTransform
    information: np.ndarray

    def __post_init__(self):
        self.information = _check_information(self.information, 6)


@dataclass
class OptimizeResult:
    cost: float
    iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# SE(3) Jacobian helpers (rotation-first tangent ordering)
# ---------------------------------------------------------------------------


def _se3_Q(omega: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    wx = skew(omega)
    rx = skew(rho)
    theta = float(np.linalg.norm(omega))
    t2 = theta * theta
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = -1.0 / 24.0 + t2 / 720.0
        c3 = -1.0 / 120.0 + t2 / 2520.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (1.0 - t2 / 2.0 - c) / theta**4
        c3 = 0.5 * ((1.0 - t2 / 2.0 - c) / theta**4
                    - 3.0 * (theta - s - theta**3 / 6.0) / theta**5)
    wr, rw = wx @ rx, rx @ wx
    wrw = wx @ rx @ wx
    return (0.5 * rx
            + c1 * (wr + rw + wrw)
            - c2 * (wx @ wr + rw @ wx - 3.0 * wrw)
            - c3 * (wrw @ wx + wx @ wrw))


def _se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    w, v = xi[:3], xi[3:]
    Jinv = _so3_left_jacobian_inv(w)
    Q = _se3_Q(w, v)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    return out


def _se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return _se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def _adjoint(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[3:, :3] = skew(t) @ R
    return out


def _log_arrays(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return se3_log(RigidTransform(Rotation.from_matrix(R), t))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root (handles semidefinite informations)."""
    w, V = np.linalg.eigh(mat)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batched quaternion (n,4) xyzw -> rotation matrices (n,3,3)."""
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    out = np.empty((q.shape[0], 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


# ---------------------------------------------------------------------------
# internal linearization state
# ---------------------------------------------------------------------------


class _State:
    """Array view of the variables used during optimization."""

    __slots__ = ("pose_R", "pose_t", "lm_p")

    def __init__(self, pose_R, pose_t, lm_p):
        self.pose_R = pose_R
        self.pose_t = pose_t
        self.lm_p = lm_p

    def perturbed(self, delta: np.ndarray, n_poses: int) -> "_State":
        pose_R = self.pose_R.copy()
        pose_t = self.pose_t.copy()
        for k in range(n_poses):
            d = delta[6 * k:6 * k + 6]
            w, v = d[:3], d[3:]
            pose_t[k] = pose_R[k] @ (_so3_left_jacobian(w) @ v) + pose_t[k]
            pose_R[k] = pose_R[k] @ so3_exp(w)
        lm_p = self.lm_p + delta[6 * n_poses:].reshape(-1, 3)
        return _State(pose_R, pose_t, lm_p)


# ---------------------------------------------------------------------------
# the graph
# ---------------------------------------------------------------------------


class FactorGraph:
    """Poses, landmarks, and the factors relating them."""

    def __init__(self):
        self._poses: dict[int, PoseVariable] = {}
        self._landmarks: dict[int, LandmarkVariable] = {}
        self._odometry: list[OdometryFactor] = []
        self._observations: list[ObservationFactor] = []
        self._priors: list[PriorFactor] = []
        self.camera: CameraModel | None = None
        self.dirty_landmarks: set[int] = set()
        self._version = 0
        self._lin_cache = None  # (version, index info, A, r, H_csc, lu)

    # -- construction ------------------------------------------------------

    def set_camera(self, camera: CameraModel) -> None:
        self.camera = camera
        self._touch()

    def add_pose(self, pose_id: int, estimate: RigidTransform) -> None:
        if pose_id in self._poses:
            raise ValueError(f"duplicate pose id {pose_id}")
        self._poses[pose_id] = PoseVariable(pose_id, estimate)
        self._touch()

    def add_landmark(self, lm_id: int, class_label: int, position: np.ndarray) -> None:
        if lm_id in self._landmarks:
            raise ValueError(f"duplicate landmark id {lm_id}")
        self._landmarks[lm_id] = LandmarkVariable(lm_id, position, class_label)
        self._touch()

    def add_odometry(self, factor: OdometryFactor) -> None:
        if factor.from_pose not in self._poses or factor.to_pose not in self._poses:
            raise UnknownVariableError(
                f"odometry references unknown pose {factor.from_pose}->{factor.to_pose}")
        self._odometry.append(factor)
        self._touch()

    def add_observation(self, factor: ObservationFactor) -> None:
        if factor.pose_id not in self._poses:
            raise UnknownVariableError(f"observation references unknown pose {factor.pose_id}")
        if factor.landmark_id not in self._landmarks:
            raise UnknownVariableError(
                f"observation references unknown landmark {factor.landmark_id}")
        if factor.camera is None:
            factor.camera = self.camera
        if factor.camera is not None and not factor.camera.in_image(factor.pixel):
            raise ValueError(f"pixel {factor.pixel} outside image bounds")
        self._observations.append(factor)
        self.dirty_landmarks.add(factor.landmark_id)
        self._touch()

    def add_prior(self, factor: PriorFactor) -> None:
        if factor.pose_id not in self._poses:
            raise UnknownVariableError(f"prior references unknown pose {factor.pose_id}")
        self._priors.append(factor)
        self._touch()

    def _touch(self) -> None:
        self._version += 1
        self._lin_cache = None

    # -- accessors ----------------------------------------------------------

    @property
    def pose_ids(self) -> list[int]:
        return sorted(self._poses)

    @property
    def landmark_ids(self) -> list[int]:
        return sorted(self._landmarks)

    @property
    def odometry_factors(self) -> list[OdometryFactor]:
        return list(self._odometry)

    @property
    def observation_factors(self) -> list[ObservationFactor]:
        return list(self._observations)

    @property
    def prior_factors(self) -> list[PriorFactor]:
        return list(self._priors)

    def pose(self, pose_id: int) -> PoseVariable:
        try:
            return self._poses[pose_id]
        except KeyError:
            raise UnknownVariableError(f"unknown pose id {pose_id}") from None

    def landmark(self, lm_id: int) -> LandmarkVariable:
        try:
            return self._landmarks[lm_id]
        except KeyError:
            raise UnknownVariableError(f"unknown landmark id {lm_id}") from None

    def has_landmark(self, lm_id: int) -> bool:
        return lm_id in self._landmarks

    def num_poses(self) -> int:
        return len(self._poses)

    def num_landmarks(self) -> int:
        return len(self._landmarks)

    def observing_poses(self, lm_id: int) -> list[int]:
        """Sorted pose ids with an observation of the landmark."""
        self.landmark(lm_id)
        return sorted({f.pose_id for f in self._observations if f.landmark_id == lm_id})

    def landmark_interval(self, lm_id: int) -> tuple[int, int]:
        poses = self.observing_poses(lm_id)
        if not poses:
            raise ValueError(f"landmark {lm_id} has no observations")
        return poses[0], poses[-1]

    def scalar_dim(self) -> int:
        return 6 * len(self._poses) + 3 * len(self._landmarks)

    def residual_dim(self) -> int:
        return 6 * len(self._priors) + 6 * len(self._odometry) + 2 * len(self._observations)

    def validate(self) -> None:
        """Check referential integrity and the one-observation-per-landmark rule."""
        observed = {f.landmark_id for f in self._observations}
        for lm_id in self._landmarks:
            if lm_id not in observed:
                raise ValueError(f"landmark {lm_id} has no observations")

    # -- state indexing ------------------------------------------------------

    def _index(self):
        pose_ids = self.pose_ids
        lm_ids = self.landmark_ids
        pose_ofs = {pid: 6 * k for k, pid in enumerate(pose_ids)}
        lm_ofs = {lid: 6 * len(pose_ids) + 3 * k for k, lid in enumerate(lm_ids)}
        return pose_ids, lm_ids, pose_ofs, lm_ofs

    def state_offset(self, kind: str, var_id: int) -> int:
        """Offset of a variable in the packed state / covariance ordering."""
        _, _, pose_ofs, lm_ofs = self._index()
        table = pose_ofs if kind == "pose" else lm_ofs
        if var_id not in table:
            raise UnknownVariableError(f"unknown {kind} id {var_id}")
        return table[var_id]

    def _snapshot(self) -> _State:
        pose_ids = self.pose_ids
        q = np.array([self._poses[p].estimate.rotation.quaternion for p in pose_ids]) \
            if pose_ids else np.zeros((0, 4))
        t = np.array([self._poses[p].estimate.translation for p in pose_ids]) \
            if pose_ids else np.zeros((0, 3))
        lm = np.array([self._landmarks[l].position for l in self.landmark_ids]) \
            if self._landmarks else np.zeros((0, 3))
        return _State(_quats_to_matrices(q) if len(pose_ids) else np.zeros((0, 3, 3)), t, lm)

    def _write_back(self, state: _State) -> None:
        for k, pid in enumerate(self.pose_ids):
            self._poses[pid].estimate = RigidTransform(
                Rotation.from_matrix(state.pose_R[k]), state.pose_t[k])
        for k, lid in enumerate(self.landmark_ids):
            self._landmarks[lid].position = state.lm_p[k].copy()
        self._touch()

    # -- residuals / cost ----------------------------------------------------

    def _residual_blocks(self, state: _State):
        """Whitened residuals per factor group; None if a point is behind the camera."""
        pose_ids, lm_ids, _, _ = self._index()
        pose_row = {p: k for k, p in enumerate(pose_ids)}
        lm_row = {l: k for k, l in enumerate(lm_ids)}

        blocks = []
        for f in self._priors:
            k = pose_row[f.pose_id]
            Em = f.mean.inverse()
            R_e = Em.rotation.matrix @ state.pose_R[k]
            t_e = Em.rotation.matrix @ state.pose_t[k] + Em.translation
            r = _log_arrays(R_e, t_e)
            blocks.append(_sqrt_psd(f.information) @ r)
        for f in self._odometry:
            ki, kj = pose_row[f.from_pose], pose_row[f.to_pose]
            Ri, ti = state.pose_R[ki], state.pose_t[ki]
            Rj, tj = state.pose_R[kj], state.pose_t[kj]
            Rm = f.measured.rotation.matrix
            R_e = Rm.T @ Ri.T @ Rj
            t_e = Rm.T @ (Ri.T @ (tj - ti) - f.measured.translation)
            blocks.append(_sqrt_psd(f.information) @ _log_arrays(R_e, t_e))

        if self._observations:
            cam = self._observations[0].camera or self.camera
            pidx = np.array([pose_row[f.pose_id] for f in self._observations])
            lidx = np.array([lm_row[f.landmark_id] for f in self._observations])
            pix = np.array([f.pixel for f in self._observations])
            infos = np.array([f.information for f in self._observations])
            Rcb = cam.body_to_camera.rotation.matrix
            tcb = cam.body_to_camera.translation
            diff = state.lm_p[lidx] - state.pose_t[pidx]
            p_body = np.einsum("nji,nj->ni", state.pose_R[pidx], diff)
            p_cam = p_body @ Rcb.T + tcb
            if np.any(p_cam[:, 2] <= _MIN_DEPTH):
                return None, None
            u = cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx
            v = cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy
            r = np.stack([u, v], axis=1) - pix
            sq = _batched_sqrt_psd(infos)
            obs_r = np.einsum("nij,nj->ni", sq, r)
        else:
            obs_r = np.zeros((0, 2))
        return blocks, obs_r

    def chi_square(self) -> float:
        """Total cost: sum of squared whitened residuals at current estimates."""
        return self._cost_of(self._snapshot())

    def _cost_of(self, state: _State) -> float:
        blocks, obs_r = self._residual_blocks(state)
        if blocks is None:
            return math.inf
        c = sum(float(b @ b) for b in blocks)
        return c + float(np.sum(obs_r * obs_r))

    # -- linearization -------------------------------------------------------

    def _linearize(self, state: _State):
        """Whitened Jacobian A (sparse) and residual r at the given state."""
        pose_ids, lm_ids, pose_ofs, lm_ofs = self._index()
        pose_row = {p: k for k, p in enumerate(pose_ids)}
        lm_row = {l: k for k, l in enumerate(lm_ids)}
        n = self.scalar_dim()
        m = self.residual_dim()

        rows, cols, vals = [], [], []
        r_full = np.zeros(m)
        row0 = 0

        def put(block, r0, c0):
            h, w = block.shape
            rr, cc = np.meshgrid(np.arange(h) + r0, np.arange(w) + c0, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(block.ravel())

        for f in self._priors:
            k = pose_row[f.pose_id]
            Em = f.mean.inverse()
            R_e = Em.rotation.matrix @ state.pose_R[k]
            t_e = Em.rotation.matrix @ state.pose_t[k] + Em.translation
            r = _log_arrays(R_e, t_e)
            sq = _sqrt_psd(f.information)
            J = sq @ _se3_right_jacobian_inv(r)
            put(J, row0, pose_ofs[f.pose_id])
            r_full[row0:row0 + 6] = sq @ r
            row0 += 6

        for f in self._odometry:
            ki, kj = pose_row[f.from_pose], pose_row[f.to_pose]
            Ri, ti = state.pose_R[ki], state.pose_t[ki]
            Rj, tj = state.pose_R[kj], state.pose_t[kj]
            Rm = f.measured.rotation.matrix
            R_e = Rm.T @ Ri.T @ Rj
            t_e = Rm.T @ (Ri.T @ (tj - ti) - f.measured.translation)
            r = _log_arrays(R_e, t_e)
            Jr_inv = _se3_right_jacobian_inv(r)
            R_f = Rj.T @ Ri
            t_f = Rj.T @ (ti - tj)
            sq = _sqrt_psd(f.information)
            J_j = sq @ Jr_inv
            J_i = -J_j @ _adjoint(R_f, t_f)
            put(J_i, row0, pose_ofs[f.from_pose])
            put(J_j, row0, pose_ofs[f.to_pose])
            r_full[row0:row0 + 6] = sq @ r
            row0 += 6

        if self._observations:
            cam = self._observations[0].camera or self.camera
            N = len(self._observations)
            pidx = np.array([pose_row[f.pose_id] for f in self._observations])
            lidx = np.array([lm_row[f.landmark_id] for f in self._observations])
            pix = np.array([f.pixel for f in self._observations])
            infos = np.array([f.information for f in self._observations])
            Rcb = cam.body_to_camera.rotation.matrix
            tcb = cam.body_to_camera.translation
            Rwb = state.pose_R[pidx]
            diff = state.lm_p[lidx] - state.pose_t[pidx]
            p_body = np.einsum("nji,nj->ni", Rwb, diff)
            p_cam = p_body @ Rcb.T + tcb
            z = p_cam[:, 2]
            if np.any(z <= _MIN_DEPTH):
                bad = int(np.argmin(z))
                raise GaugeObservabilityError(
                    f"landmark {lm_ids[lidx[bad]]} is behind the camera at linearization")
            u = cam.fx * p_cam[:, 0] / z + cam.cx
            v = cam.fy * p_cam[:, 1] / z + cam.cy
            res = np.stack([u, v], axis=1) - pix

            Jproj = np.zeros((N, 2, 3))
            Jproj[:, 0, 0] = cam.fx / z
            Jproj[:, 0, 2] = -cam.fx * p_cam[:, 0] / z**2
            Jproj[:, 1, 1] = cam.fy / z
            Jproj[:, 1, 2] = -cam.fy * p_cam[:, 1] / z**2
            JRcb = Jproj @ Rcb  # (N,2,3), d pixel / d p_body

            Pskew = np.zeros((N, 3, 3))
            Pskew[:, 0, 1] = -p_body[:, 2]
            Pskew[:, 0, 2] = p_body[:, 1]
            Pskew[:, 1, 0] = p_body[:, 2]
            Pskew[:, 1, 2] = -p_body[:, 0]
            Pskew[:, 2, 0] = -p_body[:, 1]
            Pskew[:, 2, 1] = p_body[:, 0]

            J_rot = np.einsum("nij,njk->nik", JRcb, Pskew)       # d/d omega
            J_trn = -JRcb                                         # d/d rho
            J_lm = np.einsum("nij,nkj->nik", JRcb, Rwb)           # d/d p (Rwb^T)

            sq = _batched_sqrt_psd(infos)
            J_pose = np.concatenate([J_rot, J_trn], axis=2)       # (N,2,6)
            J_pose = np.einsum("nij,njk->nik", sq, J_pose)
            J_lm = np.einsum("nij,njk->nik", sq, J_lm)
            r_wh = np.einsum("nij,nj->ni", sq, res)

            base = row0 + 2 * np.arange(N)
            r_full[row0:row0 + 2 * N] = r_wh.ravel()

            pofs = np.array([pose_ofs[f.pose_id] for f in self._observations])
            lofs = np.array([lm_ofs[f.landmark_id] for f in self._observations])
            cols_blk = np.concatenate([pofs[:, None] + np.arange(6)[None, :],
                                       lofs[:, None] + np.arange(3)[None, :]], axis=1)
            rows_blk = base[:, None, None] + np.array([0, 1])[None, :, None]
            rows.append(np.broadcast_to(rows_blk, (N, 2, 9)).ravel())
            cols.append(np.broadcast_to(cols_blk[:, None, :], (N, 2, 9)).ravel())
            vals.append(np.concatenate([J_pose, J_lm], axis=2).ravel())
            row0 += 2 * N

        A = sp.csr_matrix(
            (np.concatenate(vals) if vals else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, dtype=int),
              np.concatenate(cols) if cols else np.zeros(0, dtype=int))),
            shape=(m, n))
        return A, r_full

    def cost_gradient(self) -> np.ndarray:
        """Gradient of chi_square with respect to the packed state."""
        A, r = self._linearize(self._snapshot())
        return 2.0 * (A.T @ r)

    # -- optimization --------------------------------------------------------

    def ensure_gauge_prior(self) -> None:
        """Add an exact-style prior on the lowest pose id if no prior exists."""
        if self._priors or not self._poses:
            return
        p0 = self.pose_ids[0]
        self.add_prior(PriorFactor(p0, self._poses[p0].estimate, GAUGE_INFO * np.eye(6)))

    def _name_weak_variable(self, H: sp.csc_matrix) -> str:
        pose_ids, lm_ids, pose_ofs, lm_ofs = self._index()
        Hd = H.toarray() if H.shape[0] <= 2000 else None
        worst, name = math.inf, "unknown"
        for pid in pose_ids:
            o = pose_ofs[pid]
            blk = (Hd[o:o + 6, o:o + 6] if Hd is not None
                   else H[o:o + 6, o:o + 6].toarray())
            e = float(np.linalg.eigvalsh(blk).min())
            if e < worst:
                worst, name = e, f"pose {pid}"
        for lid in lm_ids:
            o = lm_ofs[lid]
            blk = (Hd[o:o + 3, o:o + 3] if Hd is not None
                   else H[o:o + 3, o:o + 3].toarray())
            e = float(np.linalg.eigvalsh(blk).min())
            if e < worst:
                worst, name = e, f"landmark {lid}"
        return name

    def optimize(self, max_iterations: int = 50, abs_tolerance: float = 1e-9,
                 damping: float = 0.0) -> OptimizeResult:
        """Batch Gauss-Newton with step halving.

        Terminates when the accepted cost decrease falls below
        ``abs_tolerance`` or after ``max_iterations``. Raises
        GaugeObservabilityError on rank-deficient normal equations.
        """
        self.ensure_gauge_prior()
        state = self._snapshot()
        n_poses = len(self._poses)
        cost = self._cost_of(state)
        if not math.isfinite(cost):
            raise ValueError("initial estimates place a landmark behind the camera")
        iterations = 0
        converged = False
        for _ in range(max_iterations):
            A, r = self._linearize(state)
            H = (A.T @ A).tocsc()
            if damping > 0.0:
                H = H + damping * sp.eye(H.shape[0], format="csc")
            g = A.T @ r
            delta = self._solve_normal_eqs(H, -g)
            step = 1.0
            new_state, new_cost = None, cost
            for _ in range(12):
                cand = state.perturbed(step * delta, n_poses)
                c = self._cost_of(cand)
                if c < cost:
                    new_state, new_cost = cand, c
                    break
                step *= 0.5
            iterations += 1
            if new_state is None:
                converged = True
                break
            state, prev, cost = new_state, cost, new_cost
            if prev - cost < abs_tolerance:
                converged = True
                break
        self._write_back(state)
        return OptimizeResult(cost, iterations, converged)

    def _solve_normal_eqs(self, H: sp.csc_matrix, b: np.ndarray) -> np.ndarray:
        diag = H.diagonal()
        if H.shape[0] and diag.min() < 1e-10:
            raise GaugeObservabilityError(
                "gauge or observability failure: unconstrained "
                + self._name_weak_variable(H))
        try:
            lu = splu(H)
            x = lu.solve(b)
        except RuntimeError as exc:
            raise GaugeObservabilityError(
                "gauge or observability failure: unconstrained "
                + self._name_weak_variable(H)) from exc
        if not np.all(np.isfinite(x)):
            raise GaugeObservabilityError(
                "gauge or observability failure: unconstrained "
                + self._name_weak_variable(H))
        return x

    # -- covariance recovery ---------------------------------------------------

    def _factored(self):
        """Cached (H, LU) at the current estimates."""
        if self._lin_cache is not None and self._lin_cache[0] == self._version:
            return self._lin_cache[1], self._lin_cache[2]
        A, _ = self._linearize(self._snapshot())
        H = (A.T @ A).tocsc()
        diag = H.diagonal()
        if H.shape[0] and diag.min() < 1e-10:
            raise GaugeObservabilityError(
                "gauge or observability failure: unconstrained "
                + self._name_weak_variable(H))
        try:
            lu = splu(H)
        except RuntimeError as exc:
            raise GaugeObservabilityError(
                "singular information matrix: unconstrained "
                + self._name_weak_variable(H)) from exc
        self._lin_cache = (self._version, H, lu)
        return H, lu

    def information_matrix(self) -> sp.csc_matrix:
        """Gauge-fixed information (normal-equations) matrix at current estimates."""
        H, _ = self._factored()
        return H

    def full_covariance(self) -> np.ndarray:
        """Dense inverse of the information matrix (small graphs only)."""
        H, _ = self._factored()
        n = H.shape[0]
        if n == 0:
            return np.zeros((0, 0))
        cov = np.linalg.inv(H.toarray())
        return 0.5 * (cov + cov.T)

    def marginal_block(self, pose_ids=(), landmark_ids=()) -> np.ndarray:
        """Covariance sub-block for the given variables, poses first.

        Solves the factored normal equations for the selected columns only;
        the dense inverse is never formed.
        """
        _, lu = self._factored()
        offsets = []
        for pid in pose_ids:
            o = self.state_offset("pose", pid)
            offsets.extend(range(o, o + 6))
        for lid in landmark_ids:
            o = self.state_offset("landmark", lid)
            offsets.extend(range(o, o + 3))
        if not offsets:
            return np.zeros((0, 0))
        n = self.scalar_dim()
        rhs = np.zeros((n, len(offsets)))
        rhs[offsets, np.arange(len(offsets))] = 1.0
        X = lu.solve(rhs)
        blk = X[offsets, :]
        return 0.5 * (blk + blk.T)

    def relative_marginal(self, pose_id: int, landmark_id: int) -> np.ndarray:
        """3x3 covariance of the landmark expressed in the pose's local frame."""
        joint = self.marginal_block(pose_ids=[pose_id], landmark_ids=[landmark_id])
        T = self.pose(pose_id).estimate
        p = self.landmark(landmark_id).position
        R = T.rotation.matrix
        r0 = R.T @ (p - T.translation)
        J = np.zeros((3, 9))
        J[:, :3] = skew(r0)
        J[:, 3:6] = -np.eye(3)
        J[:, 6:] = R.T
        cov = J @ joint @ J.T
        return 0.5 * (cov + cov.T)

    # -- local subgraphs and marginals ------------------------------------------

    def local_subgraph(self, landmark_id: int, poses=None) -> "FactorGraph":
        """Subgraph around a landmark: its observing poses, their odometry
        links, and every landmark (with observations) seen from those poses.
        """
        t_j = set(self.observing_poses(landmark_id) if poses is None else poses)
        sub = FactorGraph()
        if self.camera is not None:
            sub.camera = self.camera
        for pid in sorted(t_j):
            pv = self._poses[pid]
            sub.add_pose(pid, pv.estimate)
        lm_ids = {f.landmark_id for f in self._observations if f.pose_id in t_j}
        for lid in sorted(lm_ids):
            lv = self._landmarks[lid]
            sub.add_landmark(lid, lv.class_label, lv.position.copy())
        for f in self._odometry:
            if f.from_pose in t_j and f.to_pose in t_j:
                sub._odometry.append(OdometryFactor(f.from_pose, f.to_pose,
                                                    f.measured, f.information))
        for f in self._observations:
            if f.pose_id in t_j:
                sub._observations.append(ObservationFactor(
                    f.pose_id, f.landmark_id, f.pixel.copy(), f.information, f.camera))
        sub.dirty_landmarks = set()
        sub._touch()
        return sub

    def local_marginals(self, landmark_id: int, max_poses: int = 10):
        """Per-frame 3x3 marginals of a landmark from its local subgraph.

        Anchors the subgraph with an exact-style prior, optimizes it locally,
        and reads the landmark covariance relative to each observing pose.
        Returns None when the local problem is unobservable (the landmark is
        then treated as unmatchable rather than failing the pipeline).
        """
        poses = self.observing_poses(landmark_id)
        if len(poses) < 2:
            return None
        # Most recent contiguous run, capped: keeps the subgraph connected
        # through odometry even after merges split the observing set.
        run = [poses[-1]]
        for pid in reversed(poses[:-1]):
            if pid == run[-1] - 1 and len(run) < max_poses:
                run.append(pid)
            else:
                break
        t_used = sorted(run)
        if len(t_used) < 2:
            return None
        sub = self.local_subgraph(landmark_id, poses=t_used)
        anchor = t_used[0]
        sub.add_prior(PriorFactor(anchor, sub.pose(anchor).estimate,
                                  GAUGE_INFO * np.eye(6)))
        try:
            sub.optimize(max_iterations=10, abs_tolerance=1e-12)
            out = {}
            for pid in t_used:
                cov = sub.relative_marginal(pid, landmark_id)
                w = np.linalg.eigvalsh(cov)
                if w.min() < -1e-9:
                    return None
                out[pid] = cov
            return out
        except (GaugeObservabilityError, ValueError):
            return None

    # -- structural edits -----------------------------------------------------

    def merge_landmarks(self, keep_id: int, remove_id: int, reoptimize: bool = True):
        """Re-target all observations of ``remove_id`` onto ``keep_id``.

        The landmarks must share a class label. Invalidates the kept
        landmark's local marginals and (optionally) re-optimizes.
        """
        if keep_id == remove_id:
            raise ValueError("cannot merge a landmark with itself")
        keep = self.landmark(keep_id)
        rem = self.landmark(remove_id)
        if keep.class_label != rem.class_label:
            raise ValueError(
                f"class mismatch: landmark {keep_id} has class {keep.class_label}, "
                f"landmark {remove_id} has class {rem.class_label}")
        for f in self._observations:
            if f.landmark_id == remove_id:
                f.landmark_id = keep_id
        del self._landmarks[remove_id]
        self.dirty_landmarks.discard(remove_id)
        self.dirty_landmarks.add(keep_id)
        self._touch()
        if reoptimize:
            self.optimize()

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.camera = self.camera
        for pid in self.pose_ids:
            g.add_pose(pid, self._poses[pid].estimate)
        for lid in self.landmark_ids:
            lv = self._landmarks[lid]
            g.add_landmark(lid, lv.class_label, lv.position.copy())
        for f in self._odometry:
            g._odometry.append(OdometryFactor(f.from_pose, f.to_pose,
                                              f.measured, f.information))
        for f in self._observations:
            g._observations.append(ObservationFactor(
                f.pose_id, f.landmark_id, f.pixel.copy(), f.information, f.camera))
        for f in self._priors:
            g._priors.append(PriorFactor(f.pose_id, f.mean, f.information))
        g.dirty_landmarks = set(self.dirty_landmarks)
        g._touch()
        return g


def _batched_sqrt_psd(mats: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(mats)
    w = np.clip(w, 0.0, None)
    return np.einsum("nij,nj,nkj->nik", V, np.sqrt(w), V)


# ---------------------------------------------------------------------------
# local-marginal cache
# ---------------------------------------------------------------------------


class LocalMarginalCache:
    """Per-(landmark, reference pose) 3x3 covariance blocks.

    Entries are recomputed lazily for landmarks the graph marks dirty;
    landmarks whose local subgraph is unobservable are flagged unmatchable
    and skipped by candidate generation.
    """

    def __init__(self, graph: FactorGraph, max_poses: int = 10):
        self.graph = graph
        self.max_poses = max_poses
        self._entries: dict[int, dict[int, np.ndarray]] = {}
        self._traces: dict[int, dict[int, float]] = {}
        self._unmatchable: set[int] = set()

    def refresh(self, landmark_ids=None) -> int:
        """Recompute entries for dirty landmarks (or an explicit id set).

        Returns the number of landmarks recomputed.
        """
        if landmark_ids is None:
            landmark_ids = set(self.graph.dirty_landmarks)
        count = 0
        for lid in sorted(landmark_ids):
            self.graph.dirty_landmarks.discard(lid)
            self._entries.pop(lid, None)
            self._traces.pop(lid, None)
            self._unmatchable.discard(lid)
            if not self.graph.has_landmark(lid):
                continue
            result = self.graph.local_marginals(lid, max_poses=self.max_poses)
            count += 1
            if result is None:
                self._unmatchable.add(lid)
            else:
                self._entries[lid] = result
                self._traces[lid] = {p: float(np.trace(c)) for p, c in result.items()}
        return count

    def drop(self, lm_id: int) -> None:
        self._entries.pop(lm_id, None)
        self._traces.pop(lm_id, None)
        self._unmatchable.discard(lm_id)

    def is_matchable(self, lm_id: int) -> bool:
        return lm_id in self._entries

    def matchable_ids(self) -> list[int]:
        return sorted(self._entries)

    def poses(self, lm_id: int) -> list[int]:
        """Reference poses with a cached marginal for this landmark."""
        return sorted(self._entries.get(lm_id, ()))

    def pose_set(self, lm_id: int) -> frozenset:
        return frozenset(self._entries.get(lm_id, ()))

    def cov(self, lm_id: int, pose_id: int) -> np.ndarray:
        return self._entries[lm_id][pose_id]

    def trace(self, lm_id: int, pose_id: int) -> float:
        return self._traces[lm_id][pose_id]

    def interval(self, lm_id: int) -> tuple[int, int]:
        poses = self.poses(lm_id)
        return poses[0], poses[-1]
