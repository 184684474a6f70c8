"""Plain-text factor-graph and ground-truth file formats.

One whitespace-separated record per line, ``#`` starts a comment:

    CAMERA fx fy cx cy width height  tx ty tz qx qy qz qw
    POSE3 id  tx ty tz  qx qy qz qw
    LANDMARK id class  x y z
    ODOM id_from id_to  dtx dty dtz  qx qy qz qw  <21 upper-tri 6x6 info>
    OBS pose_id lm_id  u v  i11 i12 i22
    PRIOR pose_id  <21 upper-tri 6x6 info>

Quaternions are (qx qy qz qw). Information entries are the upper triangle,
row-major, over the rotation-first tangent ordering. The camera transform is
body-to-camera. A PRIOR record anchors at the pose's POSE3 estimate.

Ground-truth sidecar records:

    TRUE_POSE id tx ty tz qx qy qz qw
    TRUE_LM id class x y z
    DUP_GROUP true_id est_id [est_id ...]
"""

from __future__ import annotations

import numpy as np

from .factor_graph import (
    CameraModel,
    FactorGraph,
    ObservationFactor,
    OdometryFactor,
    PriorFactor,
)
from .geometry import RigidTransform, Rotation

_TRIU6 = np.triu_indices(6)
_TRIU2 = np.triu_indices(2)


class GraphParseError(ValueError):
    """Malformed graph file; message carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _pack_sym(mat: np.ndarray, idx) -> list[str]:
    return [_fmt(v) for v in np.asarray(mat)[idx]]


def _unpack_sym(vals: list[float], dim: int, idx) -> np.ndarray:
    out = np.zeros((dim, dim))
    out[idx] = vals
    out = out + out.T - np.diag(np.diag(out))
    return out


def _pose_fields(T: RigidTransform) -> list[str]:
    q = T.rotation.quaternion
    t = T.translation
    return [_fmt(t[0]), _fmt(t[1]), _fmt(t[2]),
            _fmt(q[0]), _fmt(q[1]), _fmt(q[2]), _fmt(q[3])]


def _parse_pose(vals: list[float]) -> RigidTransform:
    t = np.array(vals[:3])
    q = np.array(vals[3:7])
    return RigidTransform(Rotation(q), t)


def dump_graph(graph: FactorGraph) -> str:
    """Serialize a graph; deterministic byte-for-byte for equal graphs."""
    lines = []
    if graph.camera is not None:
        c = graph.camera
        lines.append(" ".join(
            ["CAMERA", _fmt(c.fx), _fmt(c.fy), _fmt(c.cx), _fmt(c.cy),
             str(c.width), str(c.height)] + _pose_fields(c.body_to_camera)))
    for pid in graph.pose_ids:
        lines.append(" ".join(["POSE3", str(pid)]
                              + _pose_fields(graph.pose(pid).estimate)))
    for lid in graph.landmark_ids:
        lm = graph.landmark(lid)
        lines.append(" ".join(["LANDMARK", str(lid), str(lm.class_label),
                               _fmt(lm.position[0]), _fmt(lm.position[1]),
                               _fmt(lm.position[2])]))
    for f in graph.prior_factors:
        lines.append(" ".join(["PRIOR", str(f.pose_id)]
                              + _pack_sym(f.information, _TRIU6)))
    for f in graph.odometry_factors:
        lines.append(" ".join(["ODOM", str(f.from_pose), str(f.to_pose)]
                              + _pose_fields(f.measured)
                              + _pack_sym(f.information, _TRIU6)))
    for f in graph.observation_factors:
        lines.append(" ".join(["OBS", str(f.pose_id), str(f.landmark_id),
                               _fmt(f.pixel[0]), _fmt(f.pixel[1])]
                              + _pack_sym(f.information, _TRIU2)))
    return "\n".join(lines) + "\n"


def save_graph(graph: FactorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_graph(graph))


def parse_graph(text: str) -> FactorGraph:
    graph = FactorGraph()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        tag, args = tok[0], tok[1:]
        try:
            if tag == "CAMERA":
                _expect(line_no, args, 13)
                vals = [float(x) for x in args]
                graph.set_camera(CameraModel(
                    vals[0], vals[1], vals[2], vals[3],
                    int(vals[4]), int(vals[5]), _parse_pose(vals[6:13])))
            elif tag == "POSE3":
                _expect(line_no, args, 8)
                pid = int(args[0])
                if pid in graph.pose_ids:
                    raise GraphParseError(line_no, f"duplicate pose id {pid}")
                graph.add_pose(pid, _parse_pose([float(x) for x in args[1:]]))
            elif tag == "LANDMARK":
                _expect(line_no, args, 5)
                lid = int(args[0])
                if graph.has_landmark(lid):
                    raise GraphParseError(line_no, f"duplicate landmark id {lid}")
                graph.add_landmark(lid, int(args[1]),
                                   np.array([float(x) for x in args[2:5]]))
            elif tag == "ODOM":
                _expect(line_no, args, 2 + 7 + 21)
                i, j = int(args[0]), int(args[1])
                _require_pose(graph, line_no, i)
                _require_pose(graph, line_no, j)
                measured = _parse_pose([float(x) for x in args[2:9]])
                info = _unpack_sym([float(x) for x in args[9:30]], 6, _TRIU6)
                graph.add_odometry(OdometryFactor(i, j, measured, info))
            elif tag == "OBS":
                _expect(line_no, args, 2 + 2 + 3)
                pid, lid = int(args[0]), int(args[1])
                _require_pose(graph, line_no, pid)
                if not graph.has_landmark(lid):
                    raise GraphParseError(line_no, f"unknown landmark id {lid}")
                pixel = np.array([float(args[2]), float(args[3])])
                i11, i12, i22 = (float(x) for x in args[4:7])
                info = np.array([[i11, i12], [i12, i22]])
                graph.add_observation(ObservationFactor(pid, lid, pixel, info))
            elif tag == "PRIOR":
                _expect(line_no, args, 1 + 21)
                pid = int(args[0])
                _require_pose(graph, line_no, pid)
                info = _unpack_sym([float(x) for x in args[1:22]], 6, _TRIU6)
                graph.add_prior(PriorFactor(pid, graph.pose(pid).estimate, info))
            else:
                raise GraphParseError(line_no, f"unknown record type {tag!r}")
        except GraphParseError:
            raise
        except (ValueError, KeyError) as exc:
            raise GraphParseError(line_no, str(exc)) from exc
    graph.dirty_landmarks = set(graph.landmark_ids)
    return graph


def load_graph(path) -> FactorGraph:
    with open(path) as fh:
        return parse_graph(fh.read())


def _expect(line_no: int, args: list[str], count: int) -> None:
    if len(args) != count:
        raise GraphParseError(line_no, f"expected {count} fields, got {len(args)}")


def _require_pose(graph: FactorGraph, line_no: int, pid: int) -> None:
    if pid not in graph.pose_ids:
        raise GraphParseError(line_no, f"unknown pose id {pid}")


# ---------------------------------------------------------------------------
# ground-truth sidecar
# ---------------------------------------------------------------------------


def dump_ground_truth(true_poses, true_landmarks, duplicate_groups) -> str:
    """Serialize ground truth.

    true_poses: {id: RigidTransform}; true_landmarks: {id: (class, xyz)};
    duplicate_groups: {true_id: [estimated ids]}.
    """
    lines = []
    for pid in sorted(true_poses):
        lines.append(" ".join(["TRUE_POSE", str(pid)]
                              + _pose_fields(true_poses[pid])))
    for lid in sorted(true_landmarks):
        cls, pos = true_landmarks[lid]
        lines.append(" ".join(["TRUE_LM", str(lid), str(cls),
                               _fmt(pos[0]), _fmt(pos[1]), _fmt(pos[2])]))
    for tid in sorted(duplicate_groups):
        ests = duplicate_groups[tid]
        lines.append(" ".join(["DUP_GROUP", str(tid)]
                              + [str(e) for e in sorted(ests)]))
    return "\n".join(lines) + "\n"


def parse_ground_truth(text: str):
    """Inverse of dump_ground_truth; returns (poses, landmarks, groups)."""
    poses, landmarks, groups = {}, {}, {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        tag, args = tok[0], tok[1:]
        if tag == "TRUE_POSE":
            _expect(line_no, args, 8)
            poses[int(args[0])] = _parse_pose([float(x) for x in args[1:]])
        elif tag == "TRUE_LM":
            _expect(line_no, args, 5)
            landmarks[int(args[0])] = (int(args[1]),
                                       np.array([float(x) for x in args[2:5]]))
        elif tag == "DUP_GROUP":
            if len(args) < 2:
                raise GraphParseError(line_no, "DUP_GROUP needs at least one member")
            groups[int(args[0])] = [int(x) for x in args[1:]]
        else:
            raise GraphParseError(line_no, f"unknown record type {tag!r}")
    return poses, landmarks, groups


def load_ground_truth(path):
    with open(path) as fh:
        return parse_ground_truth(fh.read())


def save_ground_truth(path, true_poses, true_landmarks, duplicate_groups) -> None:
    with open(path, "w") as fh:
        fh.write(dump_ground_truth(true_poses, true_landmarks, duplicate_groups))
