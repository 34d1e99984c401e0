"""Patch-level multi-modal fusion: window aggregation, channel reduction, fusion FFN.

Window aggregation sums per-tap linear maps of the visual feature map over a
K x K window centered on each patch's mapped grid cell, with zero padding
outside the grid (the bias of every tap is added regardless of padding).
All operations are per-patch; nothing here couples patches to each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import PixelMapping
from .errors import ConfigError
from .features import PatchFeatureMap

FUSION_MODES = ("full", "geometric_only", "visual_only", "concat")

LEAKY_SLOPE = 0.01


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


@dataclass
class WindowConv:
    """Per-tap weights/biases of the K x K aggregation conv."""

    weights: np.ndarray  # (K, K, C_out, C_in), indexed [p, q]
    biases: np.ndarray   # (K, K, C_out)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ConfigError(f"window weights must be (K, K, C_out, C_in), got {self.weights.shape}")
        k = self.weights.shape[0]
        if k % 2 != 1:
            raise ConfigError(f"window size must be odd, got {k}")
        if self.biases.shape != self.weights.shape[:3]:
            raise ConfigError(
                f"window biases {self.biases.shape} inconsistent with weights {self.weights.shape}"
            )

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]


def window_aggregate(fmap: PatchFeatureMap, mapping: PixelMapping,
                     conv: WindowConv) -> np.ndarray:
    """Aggregate a K x K window of visual features around each valid patch.

    Returns (n_valid, C_out) in valid-patch order. K=1 degenerates to a
    single-cell linear projection.
    """
    if mapping.grid_indices is None:
        raise ConfigError("mapping must be scaled to the grid before aggregation")
    k = conv.kernel_size
    if conv.weights.shape[3] != fmap.channels:
        raise ConfigError(
            f"window conv expects C_in={conv.weights.shape[3]}, map has C={fmap.channels}"
        )
    half = (k - 1) // 2
    grid = np.asarray(fmap.grid, dtype=np.float64)
    uv = mapping.grid_indices[mapping.valid]
    n = uv.shape[0]
    out = np.zeros((n, conv.weights.shape[2]))
    for p in range(k):
        for q in range(k):
            du, dv = p - half, q - half
            u = uv[:, 0] + du
            v = uv[:, 1] + dv
            inside = (u >= 0) & (u < fmap.width) & (v >= 0) & (v < fmap.height)
            vals = np.zeros((n, fmap.channels))
            vals[inside] = grid[v[inside], u[inside]]
            out += vals @ conv.weights[p, q].T + conv.biases[p, q]
    return out


def reduce_channels(features: np.ndarray, weight: np.ndarray,
                    bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Affine projection features @ W^T + b, shape-checked."""
    features = np.asarray(features, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if features.shape[-1] != weight.shape[1]:
        raise ConfigError(
            f"channel reduction expects input dim {weight.shape[1]}, got {features.shape[-1]}"
        )
    out = features @ weight.T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def fuse_ffn(geom: np.ndarray, vis: np.ndarray,
             w1: np.ndarray, b1: np.ndarray,
             w2: np.ndarray, b2: np.ndarray,
             slope: float = LEAKY_SLOPE) -> np.ndarray:
    """Two-layer MLP on concat(geom, vis): 2C -> hidden -> D."""
    x = np.concatenate([geom, vis], axis=-1)
    if x.shape[-1] != w1.shape[1]:
        raise ConfigError(f"fusion FFN expects input dim {w1.shape[1]}, got {x.shape[-1]}")
    return leaky_relu(x @ np.asarray(w1, dtype=np.float64).T + b1) @ np.asarray(w2, dtype=np.float64).T + b2


def fuse_features(geom_reduced: np.ndarray, vis_reduced: np.ndarray, mode: str,
                  ffn_w1, ffn_b1, ffn_w2, ffn_b2,
                  resize_w, resize_b) -> np.ndarray:
    """Produce the D-dim fused feature for any ablation mode.

    Single-modality and concat modes route concat(geom, vis) (with the unused
    side zeroed) through one linear resize so attention dimensions stay fixed.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}, expected one of {FUSION_MODES}")
    if mode == "full":
        return fuse_ffn(geom_reduced, vis_reduced, ffn_w1, ffn_b1, ffn_w2, ffn_b2)
    if mode == "geometric_only":
        vis_reduced = np.zeros_like(vis_reduced)
    elif mode == "visual_only":
        geom_reduced = np.zeros_like(geom_reduced)
    x = np.concatenate([geom_reduced, vis_reduced], axis=-1)
    return x @ np.asarray(resize_w, dtype=np.float64).T + resize_b


@dataclass
class FusedPatchSet:
    """Valid patches only: fused features plus the positional payload."""

    features: np.ndarray          # (Mv, D)
    visual_window: np.ndarray     # (Mv, C_win) aggregated visual features
    geom_reduced: np.ndarray      # (Mv, C) reduced geometric features
    centers: np.ndarray           # (Mv, 3) 3D patch centers
    pixels_norm: np.ndarray       # (Mv, 2) pixel positions normalized to [0,1]^2
    grid_uv: np.ndarray           # (Mv, 2) integer grid indices
    original_indices: np.ndarray  # (Mv,) index into the full PatchSet

    def __post_init__(self):
        if not np.isfinite(self.features).all():
            raise ValueError("fused features contain non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]
