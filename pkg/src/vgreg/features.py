"""Feature sources: DRFM feature-map files, synthetic test features, handcrafted descriptors.

The pipeline never runs a neural network; visual patch features arrive either
from DRFM files written by an out-of-process exporter or from the synthetic
provider (a smooth deterministic function of world-space position, so two
views of the same surface produce matchable maps). Geometric features come
from deterministic handcrafted descriptors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraModel, project_to_pixels, scale_to_grid
from .errors import ConfigError, DataError, FormatError
from .geometry import PatchSet, PointCloud, RigidTransform

DRFM_MAGIC = b"DRFM"
DRFM_VERSION = 1
_DRFM_HEADER = struct.Struct("<4sIIIIB3x")  # magic, version, H', W', C, dtype, pad

@dataclass(frozen=True)
class PatchFeatureMap:
    """H' x W' grid of C-dim visual patch features (no global/CLS token)."""

    grid: np.ndarray  # (H', W', C), row-major: v, then u, then channel
    source: str = "file"

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 3:
            raise ValueError(f"feature map must be (H', W', C), got {g.shape}")
        if g.shape[2] < 1:
            raise ValueError("feature map must have C > 0")
        object.__setattr__(self, "grid", g)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


def save_feature_map(fmap: PatchFeatureMap, path) -> None:
    h, w, c = fmap.grid.shape
    with open(path, "wb") as fh:
        fh.write(_DRFM_HEADER.pack(DRFM_MAGIC, DRFM_VERSION, h, w, c, 0))
        fh.write(np.ascontiguousarray(fmap.grid, dtype="<f4").tobytes())


def load_feature_map(path) -> PatchFeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < _DRFM_HEADER.size:
        raise FormatError("truncated header", f"{path}: file shorter than header")
    magic, version, h, w, c, dtype = _DRFM_HEADER.unpack_from(raw)
    if magic != DRFM_MAGIC:
        raise FormatError("bad magic", f"{path}: not a DRFM file")
    if version != DRFM_VERSION:
        raise FormatError("bad version", f"{path}: unsupported version {version}")
    if dtype != 0:
        raise FormatError("bad dtype", f"{path}: unsupported dtype tag {dtype}")
    need = _DRFM_HEADER.size + h * w * c * 4
    if len(raw) < need:
        raise FormatError(
            "truncated tensor data", f"{path}: expected {need} bytes, got {len(raw)}"
        )
    grid = np.frombuffer(raw[_DRFM_HEADER.size:need], dtype="<f4").reshape(h, w, c)
    return PatchFeatureMap(grid=grid, source="file")


def random_fourier_features(positions: np.ndarray, channels: int, seed: int,
                            length_scale: float = 1.0) -> np.ndarray:
    """Unit-normalized random Fourier features of 3D positions.

    Frequencies are fixed by the seed, so the same 3D location always maps to
    the same feature; expected inner products approximate a Gaussian kernel
    with the given length scale.
    """
    if channels < 8 or channels % 2 != 0:
        raise ConfigError(f"feature channels must be even and >= 8, got {channels}")
    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, 1.0 / length_scale, size=(channels, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=channels)
    z = np.cos(np.asarray(positions, dtype=np.float64) @ omega.T + phase)
    z *= np.sqrt(2.0 / channels)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.maximum(norms, 1e-12)


def synthetic_visual_features(world_positions: np.ndarray, camera: CameraModel,
                              channels: int, seed: int, *,
                              grid_size=None, length_scale: float = 1.0,
                              frame_from_world: Optional[RigidTransform] = None
                              ) -> PatchFeatureMap:
    """Deterministic stand-in for an exported visual feature map.

    Each grid cell hit by a projected patch gets the Fourier feature of that
    patch's world position (lowest patch index wins on collisions); empty
    cells are backfilled from the nearest populated cell. Because features
    are functions of world position alone, two views of the same surface
    yield near-identical features at corresponding cells.
    """
    world_positions = np.atleast_2d(np.asarray(world_positions, dtype=np.float64))
    if grid_size is None:
        grid_size = (camera.width // 14, camera.height // 14)
    grid_w, grid_h = grid_size
    view_positions = (
        world_positions if frame_from_world is None
        else frame_from_world.apply(world_positions)
    )
    mapping = scale_to_grid(
        project_to_pixels(view_positions, camera),
        (camera.width, camera.height), (grid_w, grid_h),
    )
    if not mapping.valid.any():
        raise DataError("no patch projects into the synthetic view")

    feats = random_fourier_features(world_positions, channels, seed, length_scale)
    grid = np.zeros((grid_h, grid_w, channels), dtype=np.float64)
    occupied = np.zeros((grid_h, grid_w), dtype=bool)
    for i in np.flatnonzero(mapping.valid):
        u, v = mapping.grid_indices[i]
        if not occupied[v, u]:
            grid[v, u] = feats[i]
            occupied[v, u] = True

    if not occupied.all():
        occ_vu = np.argwhere(occupied)  # scan order: (v, u) ascending
        empty_vu = np.argwhere(~occupied)
        d2 = ((empty_vu[:, None, :] - occ_vu[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)  # first min = scan order tie-break
        grid[empty_vu[:, 0], empty_vu[:, 1]] = grid[occ_vu[nearest, 0], occ_vu[nearest, 1]]

    return PatchFeatureMap(grid=grid.astype(np.float32), source="synthetic")


def _canonical_sign(vec: np.ndarray) -> np.ndarray:
    """Flip a vector so its largest-magnitude component is positive."""
    if not vec.any():
        return vec
    pivot = int(np.argmax(np.abs(vec)))
    return -vec if vec[pivot] < 0 else vec


def handcrafted_geometric_descriptor(points: np.ndarray, c_g: int = 64) -> np.ndarray:
    """Deterministic patch descriptor from local shape statistics.

    Slots: covariance eigenvalues (descending), surface normal
    (sign-canonicalized; zero when undefined), log point count, and
    height spread along the normal (std, max |h|, mean |h|). The base
    block is tiled to c_g. Rotating the patch changes only the normal slots.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    if n == 0:
        raise ValueError("patch must contain at least one point")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    eigvals = np.maximum(eigvals[::-1], 0.0)  # descending, clipped
    if n >= 3 and eigvals[1] > 1e-12:
        normal = _canonical_sign(eigvecs[:, 0].copy())
        heights = centered @ normal
        h_stats = [heights.std(), np.abs(heights).max(), np.abs(heights).mean()]
    else:
        normal = np.zeros(3)
        h_stats = [0.0, 0.0, 0.0]
    base = np.concatenate([eigvals, normal, [np.log1p(n)], h_stats])
    return np.resize(base, c_g)


def point_descriptors(cloud: PointCloud, k: int = 12,
                      offset_weight: float = 4.0) -> np.ndarray:
    """Rigid-invariant per-point descriptors from k-NN neighborhoods.

    Concatenates the point's offset from its neighborhood centroid expressed
    in the (skewness-sign-canonicalized) local eigenbasis, the sorted
    neighbor distances, and the neighborhood covariance eigenvalues. Identical
    point sets in two frames produce identical descriptors, which is what
    makes file-free point matching meaningful.

    The offset block is the part that identifies a point among its patch
    mates; offset_weight balances it against the slowly-varying distance
    block so nearby points stay separable in cosine space.
    """
    pts = cloud.points
    n = pts.shape[0]
    if n < 2:
        raise DataError("point descriptors need at least 2 points")
    k_eff = min(k, n - 1)
    dist, idx = cKDTree(pts).query(pts, k=k_eff + 1)
    if k_eff == 1:
        dist, idx = dist[:, None] if dist.ndim == 1 else dist, idx[:, None] if idx.ndim == 1 else idx
    nbrs = pts[idx[:, 1:]]                      # (N, k, 3), self excluded
    centroid = nbrs.mean(axis=1)                # (N, 3)
    centered = nbrs - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_eff
    eigvals, eigvecs = np.linalg.eigh(cov)      # ascending per point
    # canonicalize eigenvector signs by the skewness of neighbor projections
    proj = np.einsum("nki,nim->nkm", centered, eigvecs)
    skew = (proj ** 3).sum(axis=1)              # (N, 3)
    flip = np.where(skew < 0, -1.0, 1.0)
    eigvecs = eigvecs * flip[:, None, :]
    offset = np.einsum("ni,nim->nm", pts - centroid, eigvecs)
    nn_dists = np.zeros((n, k))                 # zero-padded when the cloud is tiny
    nn_dists[:, :k_eff] = dist[:, 1:]
    return np.concatenate([offset * offset_weight, nn_dists, eigvals[:, ::-1]], axis=1)


class FeatureProvider:
    """Capability-flagged source of visual maps and/or geometric features."""

    provides_visual_map = False
    provides_patch_features = False
    provides_point_features = False


class FileVisualProvider(FeatureProvider):
    """Loads DRFM feature maps written by the exporter."""

    provides_visual_map = True

    def __init__(self, channels: int = 384):
        self.channels = channels

    def feature_map(self, path) -> PatchFeatureMap:
        fmap = load_feature_map(path)
        if fmap.channels != self.channels:
            raise ConfigError(
                f"feature map has C={fmap.channels}, provider configured for {self.channels}"
            )
        return fmap


class SyntheticVisualProvider(FeatureProvider):
    """World-anchored synthetic feature maps for tests and demos."""

    provides_visual_map = True

    def __init__(self, channels: int = 64, length_scale: float = 1.0, seed: int = 0):
        self.channels = channels
        self.length_scale = length_scale
        self.seed = seed

    def feature_map(self, world_positions, camera: CameraModel,
                    frame_from_world: Optional[RigidTransform] = None,
                    grid_size=None) -> PatchFeatureMap:
        return synthetic_visual_features(
            world_positions, camera, self.channels, self.seed,
            grid_size=grid_size, length_scale=self.length_scale,
            frame_from_world=frame_from_world,
        )


class HandcraftedGeometricProvider(FeatureProvider):
    """Patch and point features from handcrafted shape descriptors.

    Descriptors handed to the pipeline are L2-normalized so the geometric and
    visual modalities live on comparable scales in concat space.
    """

    provides_patch_features = True
    provides_point_features = True

    def __init__(self, patch_dim: int = 64, point_k: int = 12, normalize: bool = True):
        self.patch_dim = patch_dim
        self.point_k = point_k
        self.normalize = normalize
        self.point_dim = 3 + point_k + 3

    def _maybe_normalize(self, feats: np.ndarray) -> np.ndarray:
        if not self.normalize:
            return feats
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)

    def patch_features(self, cloud: PointCloud, patches: PatchSet) -> np.ndarray:
        feats = np.stack([
            handcrafted_geometric_descriptor(cloud.points[m], self.patch_dim)
            for m in patches.members()
        ])
        return self._maybe_normalize(feats)

    def point_features(self, cloud: PointCloud, patches: PatchSet) -> np.ndarray:
        if cloud.features is not None:
            return cloud.features
        return self._maybe_normalize(point_descriptors(cloud, self.point_k))
