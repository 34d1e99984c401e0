"""Dataset builder: depth -> cloud conversion and group-limited pair generation.

Reconstructs the RGB-D pair-construction procedure: frames are sampled at a
per-scene stride, capped per scene, partitioned into consecutive groups, and
pairs are traversed only within groups. Each kept pair carries its overlap
ratio and an overlap bin tag (lo / hi for test sets, train for the rest).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .camera import CameraModel
from .errors import ConfigError, DataError
from .geometry import PointCloud, RigidTransform, grid_subsample, overlap_ratio

logger = logging.getLogger(__name__)


def load_depth_image(path) -> np.ndarray:
    """Read a 16-bit grayscale PNG of depths in millimeters."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"{path}: depth image must be single-channel, got shape {arr.shape}")
    return arr.astype(np.uint16)


def save_depth_image(depth_mm: np.ndarray, path) -> None:
    Image.fromarray(depth_mm.astype(np.uint16)).save(path)


def depth_to_cloud(depth_mm: np.ndarray, camera: CameraModel,
                   max_range: float = 6.0) -> PointCloud:
    """Back-project a depth image; pixels with zero or out-of-range depth are omitted.

    Points come out in row-major pixel order: x = (u - cx) z / fx,
    y = (v - cy) z / fy, z = depth / 1000.
    """
    depth = np.asarray(depth_mm, dtype=np.float64) * 1e-3
    height, width = depth.shape
    valid = (depth > 0) & (depth < max_range)
    if not valid.any():
        raise DataError("empty depth")
    vs, us = np.nonzero(valid)  # row-major order
    z = depth[vs, us]
    x = (us - camera.cx) * z / camera.fx
    y = (vs - camera.cy) * z / camera.fy
    return PointCloud(points=np.column_stack([x, y, z]))


@dataclass
class FrameRecord:
    index: int
    depth: str
    camera: object                      # path string or inline dict
    pose: RigidTransform                # frame -> world
    image: Optional[str] = None
    vfeat: Optional[str] = None


@dataclass
class SceneManifest:
    scene_id: str
    frames: list
    stride: Optional[int] = None        # overrides the CLI stride


@dataclass
class PairRecord:
    scene: str
    a: int
    b: int
    overlap: float
    bin_tag: str
    payload: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        d = {"scene": self.scene, "a": self.a, "b": self.b,
             "overlap": self.overlap, "bin": self.bin_tag}
        d.update(self.payload)
        return d


@dataclass
class BuildParams:
    stride: int = 50
    group_size: int = 60
    min_overlap: float = 0.05
    bins: tuple = (0.10, 0.30, 0.70)
    scene_cap: int = 100                # 0 = unlimited
    tau: float = 0.1                    # overlap matching radius
    max_range: float = 6.0
    overlap_voxel: float = 0.0          # optional subsample before overlap

    def validate(self) -> "BuildParams":
        if self.stride < 1 or self.group_size < 2:
            raise ConfigError("stride must be >= 1 and group_size >= 2")
        if not (0 <= self.min_overlap <= 1):
            raise ConfigError("min_overlap must be in [0, 1]")
        if len(self.bins) != 3 or not (self.bins[0] < self.bins[1] < self.bins[2]):
            raise ConfigError("bins must be three ascending fractions")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        return self


@dataclass
class BuildResult:
    records: list
    traversed: int                      # pair count before overlap filtering


def _pose_from_dict(d: dict) -> RigidTransform:
    return RigidTransform(
        np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
        np.asarray(d.get("translation", [0, 0, 0]), dtype=np.float64),
    )


def load_scene_manifest(path) -> list:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    scenes = []
    for scene in data.get("scenes", []):
        frames = [
            FrameRecord(
                index=f.get("index", i),
                depth=f["depth"],
                camera=f["camera"],
                pose=_pose_from_dict(f["pose"]),
                image=f.get("image"),
                vfeat=f.get("vfeat"),
            )
            for i, f in enumerate(scene["frames"])
        ]
        scenes.append(SceneManifest(
            scene_id=scene["id"], frames=frames, stride=scene.get("stride"),
        ))
    if not scenes:
        raise DataError(f"{path}: manifest contains no scenes")
    return scenes


def bin_for_overlap(overlap: float, params: BuildParams) -> Optional[str]:
    lo_min, lo_hi, hi_max = params.bins
    if lo_min <= overlap < lo_hi:
        return "lo"
    if lo_hi <= overlap <= hi_max:
        return "hi"
    if overlap >= params.min_overlap:
        return "train"
    return None


def _load_frame_cloud(frame: FrameRecord, camera: CameraModel, base_dir: Path,
                      params: BuildParams) -> PointCloud:
    path = Path(frame.depth)
    if not path.is_absolute():
        path = base_dir / path
    cloud = depth_to_cloud(load_depth_image(path), camera, params.max_range)
    if params.overlap_voxel > 0:
        cloud = PointCloud(grid_subsample(cloud, params.overlap_voxel).centers)
    return cloud


def _camera_of(frame: FrameRecord, base_dir: Path) -> CameraModel:
    if isinstance(frame.camera, dict):
        return CameraModel.from_json_dict(frame.camera)
    path = Path(frame.camera)
    if not path.is_absolute():
        path = base_dir / path
    return CameraModel.load(path)


def build_pairs(scenes: list, params: BuildParams, base_dir=".") -> BuildResult:
    """Stride-sample, cap, group, traverse within groups, filter by overlap."""
    params.validate()
    base_dir = Path(base_dir)
    records = []
    traversed = 0
    for scene in scenes:
        stride = scene.stride or params.stride
        sampled = scene.frames[::stride]
        if params.scene_cap > 0:
            sampled = sampled[:params.scene_cap]
        clouds = {}
        cameras = {}

        def get_cloud(frame: FrameRecord):
            if frame.index not in clouds:
                cameras[frame.index] = _camera_of(frame, base_dir)
                clouds[frame.index] = _load_frame_cloud(
                    frame, cameras[frame.index], base_dir, params
                )
            return clouds[frame.index]

        for g_start in range(0, len(sampled), params.group_size):
            group = sampled[g_start:g_start + params.group_size]
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    traversed += 1
                    fa, fb = group[i], group[j]
                    gt_ab = fa.pose.inverse().compose(fb.pose)
                    try:
                        ov = overlap_ratio(get_cloud(fa), get_cloud(fb), gt_ab, params.tau)
                    except DataError as exc:
                        logger.warning("scene %s pair (%d, %d): %s",
                                       scene.scene_id, fa.index, fb.index, exc)
                        continue
                    tag = bin_for_overlap(ov, params)
                    if tag is None:
                        continue
                    payload = {
                        "depth_a": fa.depth, "depth_b": fb.depth,
                        "camera_a": fa.camera, "camera_b": fb.camera,
                        "gt_rotation": [float(v) for v in gt_ab.rotation.reshape(-1)],
                        "gt_translation": [float(v) for v in gt_ab.translation],
                    }
                    if fa.vfeat and fb.vfeat:
                        payload["vfeat_a"] = fa.vfeat
                        payload["vfeat_b"] = fb.vfeat
                    records.append(PairRecord(
                        scene=scene.scene_id, a=fa.index, b=fb.index,
                        overlap=float(ov), bin_tag=tag, payload=payload,
                    ))
    records.sort(key=lambda r: (r.scene, r.a, r.b))
    return BuildResult(records=records, traversed=traversed)


def write_pairs_jsonl(records: list, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
