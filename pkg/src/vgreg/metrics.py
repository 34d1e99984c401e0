"""Matching/registration metrics and forward-mode loss evaluations.

Fractions (PIR, IR, FMR, RR) are plain counts over explicit inlier
definitions; pose errors convert rotation differences to degrees via the
trace identity. The two losses are forward-only diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform
from .matching import PatchCorrespondences, PointCorrespondences


@dataclass
class MetricReport:
    """Aggregate metrics plus the per-pair records they were computed from."""

    pir: Optional[float] = None
    ir: Optional[float] = None
    fmr: Optional[float] = None
    rr: Optional[float] = None
    rre_deg: Optional[float] = None
    rte: Optional[float] = None
    pose_recall: Optional[float] = None
    thresholds: dict = field(default_factory=dict)
    per_pair: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("pir", "ir", "fmr", "rr", "pose_recall"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    @staticmethod
    def from_report_section(section: dict, thresholds: dict) -> "MetricReport":
        """Typed view over one benchmark report section."""
        agg = section["metrics"]
        return MetricReport(
            pir=agg.get("pir_mean"), ir=agg.get("ir_mean"), fmr=agg.get("fmr"),
            rr=agg.get("rr"), rre_deg=agg.get("rre_deg_mean"),
            rte=agg.get("rte_mean"), pose_recall=agg.get("pose_recall"),
            thresholds=dict(thresholds), per_pair=list(section["pairs"]),
        )

    def recompute(self) -> "MetricReport":
        """Re-aggregate from the stored per-pair records."""
        ok = [r["metrics"] for r in self.per_pair if "error" not in r]
        with_gt = [m for m in ok if "ir" in m]
        if not with_gt:
            return MetricReport(thresholds=self.thresholds, per_pair=self.per_pair)
        irs = [m["ir"] for m in with_gt]
        rmses = [m["rmse"] for m in with_gt if "rmse" in m]
        pose_ok = [
            m for m in with_gt
            if m["rre_deg"] < self.thresholds.get("rre_threshold_deg", 5.0)
            and m["rte"] < self.thresholds.get("rte_threshold", 2.0)
        ]
        return MetricReport(
            pir=float(np.mean([m["pir"] for m in with_gt])),
            ir=float(np.mean(irs)),
            fmr=float(np.mean([
                ir > self.thresholds.get("fmr_ir_threshold", 0.05) for ir in irs
            ])),
            rr=float(np.mean([
                r < self.thresholds.get("rmse_threshold", 0.2) for r in rmses
            ])) if rmses else None,
            rre_deg=float(np.mean([m["rre_deg"] for m in pose_ok])) if pose_ok else None,
            rte=float(np.mean([m["rte"] for m in pose_ok])) if pose_ok else None,
            pose_recall=len(pose_ok) / len(with_gt),
            thresholds=self.thresholds,
            per_pair=self.per_pair,
        )


def patch_inlier_ratio(patch_corr: PatchCorrespondences,
                       members_p: Sequence[np.ndarray], members_q: Sequence[np.ndarray],
                       points_p: np.ndarray, points_q: np.ndarray,
                       gt: RigidTransform, radius: float = 0.1) -> float:
    """Fraction of patch matches with at least one cross point pair within radius."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if len(patch_corr) == 0:
        return 0.0
    q_in_p = gt.apply(np.asarray(points_q, dtype=np.float64))
    points_p = np.asarray(points_p, dtype=np.float64)
    inliers = 0
    for i in range(len(patch_corr)):
        pp = points_p[members_p[patch_corr.p_indices[i]]]
        qq = q_in_p[members_q[patch_corr.q_indices[i]]]
        d2 = ((pp[:, None, :] - qq[None, :, :]) ** 2).sum(axis=2)
        if d2.min() < radius * radius:
            inliers += 1
    return inliers / len(patch_corr)


def inlier_ratio(matches: PointCorrespondences, points_p: np.ndarray,
                 points_q: np.ndarray, gt: RigidTransform,
                 threshold: float = 0.1) -> float:
    """Fraction of point matches with residual below the threshold under gt."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    if len(matches) == 0:
        return 0.0
    xp = np.asarray(points_p, dtype=np.float64)[matches.p_indices]
    xq = np.asarray(points_q, dtype=np.float64)[matches.q_indices]
    residuals = np.linalg.norm(gt.apply(xq) - xp, axis=1)
    return float(np.mean(residuals < threshold))


def feature_matching_recall(per_pair_ir: Sequence[float],
                            ir_threshold: float = 0.05) -> float:
    """Fraction of pairs whose inlier ratio exceeds the threshold."""
    irs = np.asarray(list(per_pair_ir), dtype=np.float64)
    if irs.size == 0:
        raise ValueError("feature_matching_recall needs at least one pair")
    return float(np.mean(irs > ir_threshold))


def gt_correspondences(cloud_p: PointCloud, cloud_q: PointCloud,
                       gt: RigidTransform, radius: float = 0.1
                       ) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-truth overlap pairs: each Q point's nearest P neighbor within radius."""
    q_in_p = gt.apply(cloud_q.points)
    dist, idx = cKDTree(cloud_p.points).query(q_in_p, k=1)
    keep = dist < radius
    return idx[keep], np.flatnonzero(keep)


def registration_rmse(estimated: RigidTransform, points_p: np.ndarray,
                      points_q: np.ndarray, gt_pairs: Tuple[np.ndarray, np.ndarray]
                      ) -> float:
    """RMSE of the estimated transform over ground-truth correspondence points."""
    pi, qi = gt_pairs
    if len(pi) == 0:
        raise ValueError("no ground-truth correspondences")
    xp = np.asarray(points_p, dtype=np.float64)[pi]
    xq = np.asarray(points_q, dtype=np.float64)[qi]
    residuals = np.linalg.norm(estimated.apply(xq) - xp, axis=1)
    return float(np.sqrt(np.mean(residuals ** 2)))


def registration_recall_rmse(rmses: Sequence[Optional[float]],
                             threshold: float = 0.2) -> Tuple[list, float]:
    """Per-pair success flags and the aggregate recall; None entries are excluded."""
    flags = [None if r is None else bool(r < threshold) for r in rmses]
    valid = [f for f in flags if f is not None]
    if not valid:
        raise ValueError("no pairs with ground-truth correspondences")
    return flags, float(np.mean(valid))


def pose_errors(estimated: RigidTransform, gt: RigidTransform) -> Tuple[float, float]:
    """(RRE degrees, RTE meters) between an estimate and the ground truth."""
    cos_angle = (np.trace(gt.rotation.T @ estimated.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))
    rte = float(np.linalg.norm(estimated.translation - gt.translation))
    return rre, rte


def pose_recall(rres: Sequence[float], rtes: Sequence[float],
                rre_threshold_deg: float = 5.0, rte_threshold: float = 2.0) -> float:
    """Fraction of pairs with both errors under their thresholds."""
    rres = np.asarray(list(rres), dtype=np.float64)
    rtes = np.asarray(list(rtes), dtype=np.float64)
    if rres.size == 0:
        raise ValueError("pose_recall needs at least one pair")
    return float(np.mean((rres < rre_threshold_deg) & (rtes < rte_threshold)))


def circle_loss_overlap_aware(dists: np.ndarray, pos_masks: np.ndarray,
                              neg_masks: np.ndarray, overlaps: np.ndarray,
                              pos_margin: float = 0.1, neg_margin: float = 1.4,
                              scale: float = 24.0) -> float:
    """Overlap-aware circle loss (forward value only).

    Per anchor i:
      log(1 + sum_pos lambda_ij exp(scale * beta_p * (d - pos_margin))
            * sum_neg exp(scale * beta_n * (neg_margin - d)))
    with adaptive nonnegative weights beta_p = max(0, d - pos_margin),
    beta_n = max(0, neg_margin - d), lambda = overlap weight. Mean over
    anchors that have at least one positive; anchors without positives are
    skipped. dists are feature distances (rows = anchors).
    """
    dists = np.asarray(dists, dtype=np.float64)
    pos_masks = np.asarray(pos_masks, dtype=bool)
    neg_masks = np.asarray(neg_masks, dtype=bool)
    overlaps = np.asarray(overlaps, dtype=np.float64)
    terms = []
    for i in range(dists.shape[0]):
        pos = np.flatnonzero(pos_masks[i])
        if len(pos) == 0:
            continue
        d_pos = dists[i, pos]
        beta_p = np.maximum(0.0, d_pos - pos_margin)
        pos_sum = np.sum(overlaps[i, pos] * np.exp(scale * beta_p * (d_pos - pos_margin)))
        neg = np.flatnonzero(neg_masks[i])
        if len(neg):
            d_neg = dists[i, neg]
            beta_n = np.maximum(0.0, neg_margin - d_neg)
            neg_sum = np.sum(np.exp(scale * beta_n * (neg_margin - d_neg)))
        else:
            neg_sum = 0.0
        terms.append(np.log1p(pos_sum * neg_sum))
    if not terms:
        return 0.0
    return float(np.mean(terms))


def point_nll_loss(assignment: np.ndarray, gt_matches: Sequence[Tuple[int, int]],
                   unmatched_rows: Sequence[int] = (),
                   unmatched_cols: Sequence[int] = ()) -> float:
    """Negative log-likelihood of a slack-augmented assignment matrix.

    Averages -log of the assignment mass at ground-truth match cells plus the
    slack cells of gt-unmatched rows/columns. Mass below 1e-12 is clamped.
    """
    assignment = np.asarray(assignment, dtype=np.float64)
    m, n = assignment.shape[0] - 1, assignment.shape[1] - 1
    cells = [(i, j) for i, j in gt_matches]
    cells += [(i, n) for i in unmatched_rows]
    cells += [(m, j) for j in unmatched_cols]
    if not cells:
        return 0.0
    mass = np.array([assignment[i, j] for i, j in cells])
    return float(np.mean(-np.log(np.maximum(mass, 1e-12))))
