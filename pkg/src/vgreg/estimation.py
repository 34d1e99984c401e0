"""Rigid transform estimation: confidence-weighted Procrustes and
local-to-global registration (LGR).

LGR fits one candidate transform per matched patch pair from its local point
matches, scores every candidate by its global inlier count, then iteratively
re-fits on the running global inlier set. A re-fit is kept only if it does
not lose inliers, so the inlier count is monotone across rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DataError
from .geometry import RigidTransform
from .matching import PointCorrespondences


@dataclass(frozen=True)
class EstimationConfig:
    acceptance_radius: float = 0.1     # meters; inlier residual threshold
    refinement_iterations: int = 5
    min_local_matches: int = 3

    def __post_init__(self):
        if self.acceptance_radius <= 0:
            raise ValueError("acceptance_radius must be > 0")
        if self.refinement_iterations < 0:
            raise ValueError("refinement_iterations must be >= 0")


def weighted_procrustes(points_p: np.ndarray, points_q: np.ndarray,
                        weights: Optional[np.ndarray] = None
                        ) -> Tuple[RigidTransform, float]:
    """Least-squares rigid fit: minimize sum w ||R x_q + t - x_p||^2.

    Returns (transform mapping Q -> P, weighted residual RMSE). Reflections
    are corrected by flipping the smallest singular direction.
    """
    points_p = np.asarray(points_p, dtype=np.float64)
    points_q = np.asarray(points_q, dtype=np.float64)
    n = points_p.shape[0]
    if n < 3:
        raise DataError(f"need at least 3 pairs, got {n}")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise DataError("total weight must be > 0")
    w = weights / total

    mu_p = w @ points_p
    mu_q = w @ points_q
    cp = points_p - mu_p
    cq = points_q - mu_q
    h = (cq * w[:, None]).T @ cp
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1e-300) * 1e-9:
        raise DataError("rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = mu_p - rotation @ mu_q
    transform = RigidTransform(rotation, translation)
    residuals = np.linalg.norm(transform.apply(points_q) - points_p, axis=1)
    rmse = float(np.sqrt(w @ residuals ** 2))
    return transform, rmse


@dataclass
class LgrResult:
    transform: RigidTransform
    inliers: np.ndarray                    # indices into the point match list
    inlier_history: list = field(default_factory=list)  # count per round
    candidate_count: int = 0


def _count_inliers(transform: RigidTransform, xp: np.ndarray, xq: np.ndarray,
                   radius: float) -> np.ndarray:
    residuals = np.linalg.norm(transform.apply(xq) - xp, axis=1)
    return residuals < radius


def lgr(matches: PointCorrespondences, points_p: np.ndarray, points_q: np.ndarray,
        config: EstimationConfig = EstimationConfig()) -> LgrResult:
    """Local-to-global registration over grouped point matches.

    points_p / points_q are the full clouds; matches carry point indices plus
    their originating patch pair, which defines the local candidate groups.
    """
    if len(matches) == 0:
        raise DataError("insufficient correspondences")
    xp = np.asarray(points_p, dtype=np.float64)[matches.p_indices]
    xq = np.asarray(points_q, dtype=np.float64)[matches.q_indices]
    weights = matches.confidences

    pair_keys = np.stack([matches.source_patch_p, matches.source_patch_q], axis=1)
    unique_pairs, group_ids = np.unique(pair_keys, axis=0, return_inverse=True)
    group_ids = group_ids.reshape(-1)

    min_local = max(config.min_local_matches, 3)
    best_transform = None
    best_mask = None
    best_count = -1
    candidates = 0
    for g in range(unique_pairs.shape[0]):
        local = np.flatnonzero(group_ids == g)
        if len(local) < min_local:
            continue
        try:
            candidate, _ = weighted_procrustes(xp[local], xq[local], weights[local])
        except DataError:
            continue
        candidates += 1
        mask = _count_inliers(candidate, xp, xq, config.acceptance_radius)
        count = int(mask.sum())
        if count > best_count:
            best_transform, best_mask, best_count = candidate, mask, count
    if best_transform is None:
        raise DataError("insufficient correspondences")

    history = [best_count]
    for _ in range(config.refinement_iterations):
        idx = np.flatnonzero(best_mask)
        if len(idx) < 3:
            break
        try:
            refit, _ = weighted_procrustes(xp[idx], xq[idx], weights[idx])
        except DataError:
            break
        mask = _count_inliers(refit, xp, xq, config.acceptance_radius)
        count = int(mask.sum())
        if count < best_count:
            break  # never accept a losing re-fit: inlier count stays monotone
        best_transform, best_mask, best_count = refit, mask, count
        history.append(count)

    return LgrResult(
        transform=best_transform,
        inliers=np.flatnonzero(best_mask),
        inlier_history=history,
        candidate_count=candidates,
    )
