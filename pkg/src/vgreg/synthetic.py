"""Synthetic scenes and registration pairs for tests, demos and acceptance runs.

A scene is a jittered height-field surface in front of the camera. A pair is
the same world point set expressed in two sensor frames related by a random
rigid motion; the ground truth maps the target frame back into the source
frame. With the synthetic visual provider anchored to world positions and
handcrafted geometric descriptors, a correctly wired pipeline must recover
the motion almost exactly.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraModel
from .config import (
    AttentionConfig,
    FusionConfig,
    MatchingConfig,
    PipelineConfig,
    ProviderConfig,
)
from .geometry import PointCloud, RigidTransform
from .pipeline import FrameInput, PairInput


def default_camera() -> CameraModel:
    return CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def make_world_surface(seed: int, n_points: int = 4000,
                       extent=(3.0, 2.4), depth: float = 2.5,
                       relief: float = 0.25) -> np.ndarray:
    """Random smooth surface points centered on the optical axis at z ~ depth."""
    rng = np.random.default_rng(seed)
    xy = (rng.random((n_points, 2)) - 0.5) * np.asarray(extent)
    z = depth + relief * (
        np.sin(2.1 * xy[:, 0] + 0.7) * np.cos(1.7 * xy[:, 1] - 0.3)
        + 0.5 * np.sin(3.3 * xy[:, 1])
    )
    return np.column_stack([xy, z])


def random_rigid_transform(rng: np.random.Generator, max_angle_deg: float = 10.0,
                           max_shift: float = 0.3) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(-max_angle_deg, max_angle_deg))
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    rotation = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    translation = rng.uniform(-max_shift, max_shift, size=3)
    return RigidTransform(rotation, translation)


def make_registration_pair(seed: int, n_points: int = 4000,
                           max_angle_deg: float = 10.0, max_shift: float = 0.3,
                           point_noise: float = 0.0,
                           identity: bool = False) -> PairInput:
    """Two views of one world point set; gt maps the target frame to the source."""
    rng = np.random.default_rng(seed)
    world = make_world_surface(seed, n_points)
    camera = default_camera()
    if identity:
        gt = RigidTransform.identity()
    else:
        gt = random_rigid_transform(rng, max_angle_deg, max_shift)
    # source frame == world frame; target frame: x_q = gt^-1(world)
    points_p = world.copy()
    points_q = gt.inverse().apply(world)
    if point_noise > 0:
        points_p = points_p + rng.normal(0, point_noise, points_p.shape)
        points_q = points_q + rng.normal(0, point_noise, points_q.shape)
    return PairInput(
        pair_id=f"synthetic-{seed}",
        source=FrameInput(
            cloud=PointCloud(points_p), camera=camera,
            world_from_frame=RigidTransform.identity(),
        ),
        target=FrameInput(
            cloud=PointCloud(points_q), camera=camera,
            world_from_frame=gt,
        ),
        gt=gt,
        extra={"seed": seed},
    )


def e2e_config(seed: int = 0) -> PipelineConfig:
    """Small synthetic-provider configuration used by the end-to-end checks.

    Mixed positional embedding, K=3 window, attention stack at stream width
    128 with QKV dim 64; paired with identity_reduction-initialized weights.
    """
    cfg = PipelineConfig(
        voxel_size=0.25,
        seed=seed,
        providers=ProviderConfig(
            visual="synthetic", visual_channels=128, geometric_channels=64,
            synthetic_length_scale=0.3,
        ),
        fusion=FusionConfig(
            window_size=3, mode="full", reduce_dim=128, ffn_hidden=256, fused_dim=256,
        ),
        attention=AttentionConfig(mode="mixed", num_layers=3, dim=64, heads=4),
        matching=MatchingConfig(
            patch_topk=192, patch_temperature=0.05, point_score_scale=2000.0,
        ),
    )
    return cfg.validate()
