"""Pinhole projection of patch centers, grid scaling and mapping-noise injection.

Projection: (u*s, v*s, s)^T = K x, applied after the optional sensor->camera
extrinsic x -> R x + t. A patch is valid iff its depth s is positive and the
pixel lands inside [0, W) x [0, H). Invalid patches are masked, never errors;
downstream stages drop them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError
from .geometry import RigidTransform


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics (pixels), image size, optional sensor->camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: Optional[RigidTransform] = None

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be > 0, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_json_dict(self) -> dict:
        d = {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }
        if self.extrinsics is not None:
            d["extrinsic_rotation"] = [float(v) for v in self.extrinsics.rotation.reshape(-1)]
            d["extrinsic_translation"] = [float(v) for v in self.extrinsics.translation]
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "CameraModel":
        ext = None
        if "extrinsic_rotation" in d:
            rot = np.asarray(d["extrinsic_rotation"], dtype=np.float64).reshape(3, 3)
            t = np.asarray(d.get("extrinsic_translation", [0, 0, 0]), dtype=np.float64)
            ext = RigidTransform(rot, t)
        try:
            return CameraModel(
                fx=float(d["fx"]), fy=float(d["fy"]),
                cx=float(d["cx"]), cy=float(d["cy"]),
                width=int(d["width"]), height=int(d["height"]),
                extrinsics=ext,
            )
        except KeyError as exc:
            raise ConfigError(f"camera JSON missing field {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))

    @staticmethod
    def load(path) -> "CameraModel":
        return CameraModel.from_json_dict(json.loads(Path(path).read_text()))


@dataclass
class PixelMapping:
    """Per-patch pixel positions, integer grid indices after scaling, and validity."""

    pixels: np.ndarray           # (M, 2) float (u, v); meaningful only where valid
    valid: np.ndarray            # (M,) bool
    grid_indices: Optional[np.ndarray] = None  # (M, 2) int (u_hat, v_hat) once scaled

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.grid_indices is not None:
            self.grid_indices = np.asarray(self.grid_indices, dtype=np.int64)


def project_to_pixels(centers: np.ndarray, camera: CameraModel) -> PixelMapping:
    """Project 3D patch centers to pixel positions, masking invalid ones."""
    pts = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if camera.extrinsics is not None:
        pts = camera.extrinsics.apply(pts)
    homog = pts @ camera.intrinsic_matrix.T  # rows: (u*s, v*s, s)
    s = homog[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = homog[:, :2] / s[:, None]
    valid = (
        (s > 0)
        & np.isfinite(uv).all(axis=1)
        & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width)
        & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
    )
    uv = np.where(valid[:, None], uv, 0.0)
    return PixelMapping(pixels=uv, valid=valid)


def scale_to_grid(mapping: PixelMapping, image_size: Tuple[int, int],
                  grid_size: Tuple[int, int]) -> PixelMapping:
    """Scale pixel positions to feature-grid cells: u_hat = floor(u * W'/W).

    Cells falling outside the grid are marked invalid rather than clamped.
    """
    width, height = image_size
    grid_w, grid_h = grid_size
    if grid_w < 1 or grid_h < 1:
        raise ConfigError(f"grid size must be >= 1, got {grid_w}x{grid_h}")
    u_hat = np.floor(mapping.pixels[:, 0] * grid_w / width).astype(np.int64)
    v_hat = np.floor(mapping.pixels[:, 1] * grid_h / height).astype(np.int64)
    valid = (
        mapping.valid
        & (u_hat >= 0) & (u_hat < grid_w)
        & (v_hat >= 0) & (v_hat < grid_h)
    )
    grid = np.stack([u_hat, v_hat], axis=1)
    grid[~valid] = 0
    return PixelMapping(pixels=mapping.pixels, valid=valid, grid_indices=grid)


def inject_pixel_noise(mapping: PixelMapping, sigma: float, seed: int,
                       camera: CameraModel) -> PixelMapping:
    """Add i.i.d. Gaussian(0, sigma^2) to raw pixel positions; re-check validity.

    sigma == 0 returns the input mapping unchanged (bit-identical). Applied
    before grid scaling, so callers re-run scale_to_grid afterwards.
    """
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return mapping
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=mapping.pixels.shape)
    pixels = mapping.pixels + noise
    valid = (
        mapping.valid
        & (pixels[:, 0] >= 0) & (pixels[:, 0] < camera.width)
        & (pixels[:, 1] >= 0) & (pixels[:, 1] < camera.height)
    )
    pixels = np.where(valid[:, None], pixels, 0.0)
    return PixelMapping(pixels=pixels, valid=valid)
