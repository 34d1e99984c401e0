"""Point cloud containers, rigid transforms, grid subsampling and neighbor queries.

Everything here is a pure function over immutable-by-convention numpy arrays;
all tie-breaking rules are deterministic so results are reproducible across
runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    """Raw 3D points (meters) with optional per-point feature vectors."""

    points: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite values")
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"features must be (N, D) with N={pts.shape[0]}, got {f.shape}"
                )
            object.__setattr__(self, "features", f)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: x -> R x + t. Rotation must be proper orthonormal."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.isfinite(R).all() or not np.isfinite(t).all():
            raise ValueError("transform contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return RigidTransform(m[:3, :3], m[:3, 3])


@dataclass
class PatchSet:
    """Grid-subsampled patches: centers, per-point patch indices, optional features."""

    centers: np.ndarray
    point_assignment: np.ndarray
    patch_features: Optional[np.ndarray] = None
    _members: Optional[list] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise ValueError(f"centers must be (M, 3), got {self.centers.shape}")
        if not np.isfinite(self.centers).all():
            raise ValueError("patch centers contain non-finite values")
        self.point_assignment = np.asarray(self.point_assignment, dtype=np.int64)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def members(self) -> list:
        """Per-patch arrays of member point indices (cached)."""
        if self._members is None:
            order = np.argsort(self.point_assignment, kind="stable")
            counts = np.bincount(self.point_assignment, minlength=len(self))
            self._members = [np.array(a) for a in np.split(order, np.cumsum(counts)[:-1])]
        return self._members


def grid_subsample(cloud: PointCloud, voxel_size: float) -> PatchSet:
    """Voxel-grid subsampling: one patch per occupied voxel, center = centroid.

    Patches are ordered by lexicographically sorted voxel index, so output
    is independent of point order up to the centroid arithmetic.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
    if len(cloud) == 0:
        raise DataError("empty input")
    vox = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, assignment, counts = np.unique(
        vox, axis=0, return_inverse=True, return_counts=True
    )
    assignment = assignment.reshape(-1)
    n_patches = counts.shape[0]
    centers = np.zeros((n_patches, 3))
    for dim in range(3):
        centers[:, dim] = np.bincount(
            assignment, weights=cloud.points[:, dim], minlength=n_patches
        )
    centers /= counts[:, None]
    return PatchSet(centers=centers, point_assignment=assignment)


def assign_points_to_patches(points: np.ndarray, centers: np.ndarray,
                             chunk: int = 2048) -> np.ndarray:
    """Nearest-center assignment; exact, ties broken by lowest center index."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] == 0:
        raise DataError("no patch centers")
    out = np.empty(points.shape[0], dtype=np.int64)
    for start in range(0, points.shape[0], chunk):
        block = points[start:start + chunk]
        d2 = ((block[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = np.argmin(d2, axis=1)  # first min = lowest index
    return out


def apply_transform(transform: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Rigidly move a cloud; features ride along unchanged."""
    return PointCloud(points=transform.apply(cloud.points), features=cloud.features)


def knn(query: np.ndarray, reference: np.ndarray, k: int):
    """Exact k nearest neighbors, distance-ascending, lowest index on ties.

    Returns (indices, distances), each of shape (n_query, k). Brute force by
    design: KD-tree backends do not guarantee the tie order this contract pins.
    """
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    n_ref = reference.shape[0]
    if k > n_ref:
        raise ValueError(f"k={k} exceeds reference size {n_ref}")
    d2 = (
        (query ** 2).sum(axis=1)[:, None]
        + (reference ** 2).sum(axis=1)[None, :]
        - 2.0 * query @ reference.T
    )
    np.maximum(d2, 0.0, out=d2)
    # stable sort keeps reference order among equal distances
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    return idx, dist


def overlap_ratio(cloud_p: PointCloud, cloud_q: PointCloud,
                  gt_transform: RigidTransform, tau: float,
                  symmetric: bool = False) -> float:
    """Fraction of P-points with a neighbor in gt_transform(Q) closer than tau.

    With symmetric=True returns the min of both directions.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if len(cloud_p) == 0 or len(cloud_q) == 0:
        raise DataError("empty input")
    q_in_p = gt_transform.apply(cloud_q.points)
    dist_p, _ = cKDTree(q_in_p).query(cloud_p.points, k=1)
    frac_p = float(np.mean(dist_p < tau))
    if not symmetric:
        return frac_p
    dist_q, _ = cKDTree(cloud_p.points).query(q_in_p, k=1)
    frac_q = float(np.mean(dist_q < tau))
    return min(frac_p, frac_q)
