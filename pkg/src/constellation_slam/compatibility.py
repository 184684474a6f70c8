"""Match residuals, chi-square gating, and the two compatibility metrics.

The joint-compatibility (JC) score gates the stacked world-frame residual
of a merge set against the corresponding sub-blocks of the full system
covariance (3m degrees of freedom). The geometric-compatibility (GC) score
instead aligns the two constellations with a closed-form rigid fit plus one
weighted tangent-space refinement and evaluates a blockwise Mahalanobis sum
using per-frame local landmark covariances (3m - 6 degrees of freedom).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaincinv

from .geometry import (
    DegenerateGeometryError,
    RigidTransform,
    apply_to_points,
    compose,
    procrustes_align,
    se3_exp,
    skew,
)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class CandidateMatch:
    """Ordered landmark pair: ``a`` from the older constellation, ``b`` newer."""

    a: int
    b: int

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("candidate match must pair distinct landmarks")


@dataclass(frozen=True)
class MergeSet:
    """Ordered candidate matches defining two constellations."""

    matches: tuple[CandidateMatch, ...]

    def __init__(self, matches):
        matches = tuple(matches)
        a_side = [m.a for m in matches]
        b_side = [m.b for m in matches]
        if len(set(a_side)) != len(a_side) or len(set(b_side)) != len(b_side):
            raise ValueError("constellation indices must be distinct")
        if set(a_side) & set(b_side):
            raise ValueError("constellations must be disjoint")
        object.__setattr__(self, "matches", matches)

    @property
    def cardinality(self) -> int:
        return len(self.matches)

    @property
    def constellation_a(self) -> tuple[int, ...]:
        return tuple(m.a for m in self.matches)

    @property
    def constellation_b(self) -> tuple[int, ...]:
        return tuple(m.b for m in self.matches)

    def __len__(self) -> int:
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)


@dataclass
class GcResult:
    d_gc: float
    alignment: RigidTransform
    dof: int
    gate_passed: bool


@dataclass
class JcResult:
    d_jc: float
    dof: int
    gate_passed: bool


@dataclass
class CompatibilityConfig:
    """Gating knobs shared by the metrics and the search."""

    quantile: float = 0.95
    min_cardinality: int = 3
    frame_selection: str = "min_trace"  # or "min_det"

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must be in (0, 1)")
        if self.min_cardinality < 3:
            raise ValueError("minimum cardinality is 3 (the gate needs 3m-6 >= 3)")


# ---------------------------------------------------------------------------
# scalar pieces
# ---------------------------------------------------------------------------


def residual(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    """Matching residual between two landmark estimates: p_a - p_b."""
    return np.asarray(p_a, dtype=float) - np.asarray(p_b, dtype=float)


def chi2_quantile(dof: int, q: float) -> float:
    """Chi-square quantile via the inverse regularized incomplete gamma."""
    if dof < 1:
        raise ValueError("degenerate gate: dof must be >= 1")
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    return 2.0 * float(gammaincinv(dof / 2.0, q))


# ---------------------------------------------------------------------------
# JC
# ---------------------------------------------------------------------------


def jc_distance(r_stacked: np.ndarray, cov_aa: np.ndarray, cov_bb: np.ndarray,
                cov_ab: np.ndarray, quantile: float = 0.95) -> JcResult:
    """Joint compatibility from stacked world-frame residual and covariance
    sub-blocks: Sigma_r = cov_aa + cov_bb - cov_ab - cov_ab^T.
    """
    r = np.asarray(r_stacked, dtype=float).ravel()
    n = r.size
    if n % 3 != 0:
        raise ValueError("stacked residual length must be a multiple of 3")
    m = n // 3
    sigma_r = cov_aa + cov_bb - cov_ab - cov_ab.T
    sigma_r = 0.5 * (sigma_r + sigma_r.T)
    try:
        factor = cho_factor(sigma_r)
    except np.linalg.LinAlgError as exc:
        raise ValueError("inconsistent covariance query: residual covariance "
                         "not positive definite") from exc
    d = float(r @ cho_solve(factor, r))
    dof = 3 * m
    return JcResult(d, dof, d < chi2_quantile(dof, quantile))


def jc_distance_for_merge_set(graph, merge_set: MergeSet,
                              quantile: float = 0.95) -> JcResult:
    """JC of a merge set using marginal covariance recovery on the graph."""
    a_ids = list(merge_set.constellation_a)
    b_ids = list(merge_set.constellation_b)
    m = len(a_ids)
    joint = graph.marginal_block(landmark_ids=a_ids + b_ids)
    cov_aa = joint[:3 * m, :3 * m]
    cov_bb = joint[3 * m:, 3 * m:]
    cov_ab = joint[:3 * m, 3 * m:]
    r = np.concatenate([
        residual(graph.landmark(a).position, graph.landmark(b).position)
        for a, b in ((mm.a, mm.b) for mm in merge_set)])
    return jc_distance(r, cov_aa, cov_bb, cov_ab, quantile)


# ---------------------------------------------------------------------------
# GC
# ---------------------------------------------------------------------------


def gc_cost_at(transform: RigidTransform, points_a: np.ndarray,
               points_b: np.ndarray, covs_a: np.ndarray,
               covs_b: np.ndarray) -> float:
    """Blockwise Mahalanobis cost at a fixed alignment.

    sum_j r_j^T (SigmaA_j + R SigmaB_j R^T)^{-1} r_j with
    r_j = a_j - transform . b_j. O(m): the stacked system is never formed.
    """
    R = transform.rotation.matrix
    res = np.asarray(points_a, float) - apply_to_points(transform, points_b)
    total = 0.0
    for j in range(res.shape[0]):
        W = covs_a[j] + R @ covs_b[j] @ R.T
        total += float(res[j] @ cho_solve(cho_factor(W), res[j]))
    return total


def _refine_alignment(T0: RigidTransform, A: np.ndarray, B: np.ndarray,
                      covs_a: np.ndarray, covs_b: np.ndarray) -> RigidTransform:
    """One weighted Gauss-Newton step in the tangent of the alignment,
    with the covariance combination locked at T0."""
    R = T0.rotation.matrix
    res = A - apply_to_points(T0, B)
    H = np.zeros((6, 6))
    g = np.zeros(6)
    for j in range(A.shape[0]):
        W = covs_a[j] + R @ covs_b[j] @ R.T
        Winv = cho_solve(cho_factor(W), np.eye(3))
        J = np.hstack([R @ skew(B[j]), -R])  # d r_j / d (omega, rho)
        H += J.T @ Winv @ J
        g += J.T @ Winv @ res[j]
    try:
        delta = np.linalg.solve(H, -g)
    except np.linalg.LinAlgError:
        return T0
    return compose(T0, se3_exp(delta))


def gc_distance(estimates_a, estimates_b, covs_a, covs_b,
                quantile: float = 0.95) -> GcResult:
    """Geometric compatibility of two corresponded constellations.

    Two-step evaluation: closed-form rigid alignment of the point sets, then
    one weighted refinement of the alignment with covariance terms locked.
    The score is the blockwise Mahalanobis sum at the better of the two
    transforms, gated against chi-square with 3m - 6 degrees of freedom.
    """
    A = np.asarray(estimates_a, dtype=float).reshape(-1, 3)
    B = np.asarray(estimates_b, dtype=float).reshape(-1, 3)
    m = A.shape[0]
    if m < 3:
        raise ValueError("insufficient degrees of freedom: need cardinality >= 3")
    covs_a = np.asarray(covs_a, dtype=float).reshape(m, 3, 3)
    covs_b = np.asarray(covs_b, dtype=float).reshape(m, 3, 3)

    T_bar = procrustes_align(A, B)
    cost_bar = gc_cost_at(T_bar, A, B, covs_a, covs_b)
    T_ref = _refine_alignment(T_bar, A, B, covs_a, covs_b)
    cost_ref = gc_cost_at(T_ref, A, B, covs_a, covs_b)
    if cost_ref <= cost_bar:
        d, T = cost_ref, T_ref
    else:
        d, T = cost_bar, T_bar

    dof = 3 * m - 6
    return GcResult(d, T, dof, d < chi2_quantile(dof, quantile))


# ---------------------------------------------------------------------------
# frame selection and prefix gating against the local-marginal cache
# ---------------------------------------------------------------------------


def select_frames(merge_set: MergeSet, caches,
                  mode: str = "min_trace") -> tuple[int, int]:
    """Pick one reference pose per constellation from the common frames.

    Minimizes the summed trace (or log-determinant) of the cached landmark
    marginals over the constellation; ties break to the smallest pose id.
    """
    pose_a = _select_frame(merge_set.constellation_a, caches, mode)
    pose_b = _select_frame(merge_set.constellation_b, caches, mode)
    return pose_a, pose_b


def _select_frame(lm_ids, caches, mode: str) -> int:
    common = None
    for lid in lm_ids:
        s = caches.pose_set(lid)
        common = s if common is None else (common & s)
        if not common:
            break
    if not common:
        raise ValueError("locality violated: constellation has no common frame")
    best_pose, best_score = None, None
    for pid in sorted(common):
        if mode == "min_det":
            score = sum(float(np.linalg.slogdet(caches.cov(lid, pid))[1])
                        for lid in lm_ids)
        else:
            score = sum(caches.trace(lid, pid) for lid in lm_ids)
        if best_score is None or score < best_score:
            best_pose, best_score = pid, score
    return best_pose


def gc_for_merge_set(graph, caches, merge_set: MergeSet,
                     config: CompatibilityConfig | None = None) -> GcResult:
    """Evaluate GC of a merge set from graph estimates and cached marginals."""
    config = config or CompatibilityConfig()
    pose_a, pose_b = select_frames(merge_set, caches, config.frame_selection)
    Ta = graph.pose(pose_a).estimate.inverse()
    Tb = graph.pose(pose_b).estimate.inverse()
    A = np.array([Ta.rotation.matrix @ graph.landmark(a).position + Ta.translation
                  for a in merge_set.constellation_a])
    B = np.array([Tb.rotation.matrix @ graph.landmark(b).position + Tb.translation
                  for b in merge_set.constellation_b])
    covs_a = np.array([caches.cov(a, pose_a) for a in merge_set.constellation_a])
    covs_b = np.array([caches.cov(b, pose_b) for b in merge_set.constellation_b])
    return gc_distance(A, B, covs_a, covs_b, config.quantile)


def gc_gate_partial(prefix: MergeSet, graph, caches,
                    config: CompatibilityConfig | None = None):
    """Gate a partial hypothesis during search.

    Below cardinality 3 the gate has no degrees of freedom and always
    passes (the unary/binary constraints carry the burden there).
    Returns (passed, d_gc_or_None).
    """
    config = config or CompatibilityConfig()
    if prefix.cardinality < 3:
        return True, None
    try:
        result = gc_for_merge_set(graph, caches, prefix, config)
    except (DegenerateGeometryError, ValueError):
        return False, None
    return result.gate_passed, result.d_gc
