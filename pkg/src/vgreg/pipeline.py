"""End-to-end registration runner and benchmark harness.

register() executes: subsample -> project/scale (optional pixel noise) ->
window-aggregate -> fuse -> attention stack -> patch matching -> point
matching -> LGR -> metrics. Everything is deterministic given the config
seed; per-pair/per-frame RNG seeds are derived by hashing stable labels.

run_benchmark() maps register() over a pair manifest with a bounded worker
pool and a deterministic ordered reduction, and emits JSON/CSV reports that
embed the config and a hash of the weights.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import transformer as tfm
from .camera import CameraModel, inject_pixel_noise, project_to_pixels, scale_to_grid
from .cloud_io import load_point_cloud
from .config import PipelineConfig
from .errors import ConfigError, DataError, StageError, VgregError
from .estimation import EstimationConfig, lgr
from .features import (
    HandcraftedGeometricProvider,
    PatchFeatureMap,
    SyntheticVisualProvider,
    load_feature_map,
)
from .fusion import FusedPatchSet, WindowConv, fuse_features, reduce_channels, window_aggregate
from .geometry import PatchSet, PointCloud, RigidTransform, grid_subsample
from .matching import (
    PatchCorrespondences,
    PointCorrespondences,
    match_patches,
    match_points,
)
from .metrics import (
    gt_correspondences,
    inlier_ratio,
    patch_inlier_ratio,
    pose_errors,
    registration_rmse,
)
from .weights import WeightStore, tensor_specs, validate_weights

logger = logging.getLogger(__name__)

WORKERS_ENV = "VGREG_WORKERS"


def derive_seed(*parts) -> int:
    """Stable cross-process seed from arbitrary labels (never uses hash())."""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass
class FrameInput:
    """One frame of a registration pair."""

    cloud: PointCloud
    camera: CameraModel
    feature_map: Optional[PatchFeatureMap] = None
    vfeat_path: Optional[str] = None
    world_from_frame: Optional[RigidTransform] = None  # synthetic provider anchor
    point_features: Optional[np.ndarray] = None


@dataclass
class PairInput:
    pair_id: str
    source: FrameInput  # P
    target: FrameInput  # Q
    gt: Optional[RigidTransform] = None  # maps Q into P's frame
    extra: dict = field(default_factory=dict)  # echoed into the per-pair record


@dataclass
class RegistrationResult:
    pair_id: str
    transform: RigidTransform
    patch_matches: PatchCorrespondences
    point_matches: PointCorrespondences
    inliers: np.ndarray
    metrics: dict
    timing: dict
    counts: dict

    def to_json_dict(self, include_timing: bool = True,
                     include_correspondences: bool = True) -> dict:
        d = {
            "pair_id": self.pair_id,
            "rotation": [float(v) for v in self.transform.rotation.reshape(-1)],
            "translation": [float(v) for v in self.transform.translation],
            "metrics": self.metrics,
            "counts": self.counts,
        }
        if include_correspondences:
            d["patch_matches"] = [
                {"Pi": int(p), "Qi": int(q), "score": float(s)}
                for p, q, s in zip(self.patch_matches.p_indices,
                                   self.patch_matches.q_indices,
                                   self.patch_matches.scores)
            ]
            d["point_matches"] = [
                {"pi": int(p), "qi": int(q), "conf": float(c)}
                for p, q, c in zip(self.point_matches.p_indices,
                                   self.point_matches.q_indices,
                                   self.point_matches.confidences)
            ]
            d["inliers"] = [int(i) for i in self.inliers]
        if include_timing:
            d["timing"] = self.timing
        return d


class _StageTimer:
    def __init__(self):
        self.timing = {}

    def record(self, stage: str, start: float) -> None:
        self.timing[stage] = self.timing.get(stage, 0.0) + (time.perf_counter() - start)


def _build_layer(store: WeightStore, base: str, cross: bool) -> tfm.AttentionLayerWeights:
    kwargs = dict(
        wq=store.get(f"{base}.wq"), wk=store.get(f"{base}.wk"),
        wv=store.get(f"{base}.wv"), wo=store.get(f"{base}.wo"),
        ffn1_w=store.get(f"{base}.ffn1.weight"), ffn1_b=store.get(f"{base}.ffn1.bias"),
        ffn2_w=store.get(f"{base}.ffn2.weight"), ffn2_b=store.get(f"{base}.ffn2.bias"),
        norm1_w=store.get(f"{base}.norm1.weight"), norm1_b=store.get(f"{base}.norm1.bias"),
        norm2_w=store.get(f"{base}.norm2.weight"), norm2_b=store.get(f"{base}.norm2.bias"),
    )
    if cross:
        kwargs["norm_kv_w"] = store.get(f"{base}.norm_kv.weight")
        kwargs["norm_kv_b"] = store.get(f"{base}.norm_kv.bias")
    return tfm.AttentionLayerWeights(**kwargs)


def build_stack(store: WeightStore, config: PipelineConfig) -> tfm.AttentionStack:
    layers = range(config.attention.num_layers)
    return tfm.AttentionStack(
        self_layers=[_build_layer(store, f"vgt.layer{l}.self", cross=False) for l in layers],
        cross_layers=[_build_layer(store, f"vgt.layer{l}.cross", cross=True) for l in layers],
        heads=config.attention.heads,
        mode=config.attention.mode,
    )


def build_positional_context(centers: np.ndarray, pixels_norm: np.ndarray,
                             store: WeightStore, config: PipelineConfig
                             ) -> tfm.PositionalContext:
    """Compute the cached per-frame positional quantities exactly once."""
    mode = config.attention.mode
    ctx = tfm.PositionalContext()
    if mode == "none":
        return ctx
    r = tfm.pairwise_geometric_embedding(
        centers, config.sigma_d, config.attention.k_angle,
        store.get("vgt.geo.dist_proj.weight"), store.get("vgt.geo.dist_proj.bias"),
        store.get("vgt.geo.angle_proj.weight"), store.get("vgt.geo.angle_proj.bias"),
        config.embedding_dim,
    )
    ctx.r_hat = tfm.shared_project(r, store.get("vgt.shared.wr"))
    if mode == "mixed":
        ctx.angles_qk = tfm.positional_angles(
            pixels_norm,
            store.get("vgt.pos.mlp_p.layer1.weight"), store.get("vgt.pos.mlp_p.layer1.bias"),
            store.get("vgt.pos.mlp_p.layer2.weight"), store.get("vgt.pos.mlp_p.layer2.bias"),
        )
        ctx.angles_qr = tfm.positional_angles(
            pixels_norm,
            store.get("vgt.pos.mlp_pprime.layer1.weight"), store.get("vgt.pos.mlp_pprime.layer1.bias"),
            store.get("vgt.pos.mlp_pprime.layer2.weight"), store.get("vgt.pos.mlp_pprime.layer2.bias"),
        )
    return ctx


def _window_conv_from_store(store: WeightStore, config: PipelineConfig) -> WindowConv:
    k = config.fusion.window_size
    weights = np.stack([
        np.stack([store.get(f"fusion.window.weight[{p}][{q}]") for q in range(k)])
        for p in range(k)
    ])
    biases = np.stack([
        np.stack([store.get(f"fusion.window.bias[{p}][{q}]") for q in range(k)])
        for p in range(k)
    ])
    return WindowConv(weights=weights, biases=biases)


def _resolve_feature_map(frame: FrameInput, patches: PatchSet,
                         config: PipelineConfig, seed: int) -> PatchFeatureMap:
    if frame.feature_map is not None:
        fmap = frame.feature_map
    elif frame.vfeat_path is not None:
        try:
            fmap = load_feature_map(frame.vfeat_path)
        except OSError as exc:
            raise DataError(f"cannot read feature map {frame.vfeat_path}: {exc}") from exc
    elif config.providers.visual == "synthetic":
        provider = SyntheticVisualProvider(
            channels=config.providers.visual_channels,
            length_scale=config.providers.synthetic_length_scale,
            seed=seed,
        )
        world_from_frame = frame.world_from_frame or RigidTransform.identity()
        world = world_from_frame.apply(patches.centers)
        fmap = provider.feature_map(
            world, frame.camera, frame_from_world=world_from_frame.inverse()
        )
    else:
        raise DataError("no visual feature source for frame")
    if fmap.channels != config.providers.visual_channels:
        raise ConfigError(
            f"feature map has C={fmap.channels}, config expects "
            f"{config.providers.visual_channels}"
        )
    return fmap


def _stage(label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except VgregError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(label, exc) from exc


@dataclass
class _ProcessedFrame:
    patches: PatchSet
    fused: FusedPatchSet
    point_features: np.ndarray
    ctx: tfm.PositionalContext


def _process_frame(frame: FrameInput, tag: str, pair_id: str,
                   config: PipelineConfig, store: WeightStore,
                   geo_provider: HandcraftedGeometricProvider,
                   timer: _StageTimer) -> _ProcessedFrame:
    t0 = time.perf_counter()
    patches = _stage("subsample", grid_subsample, frame.cloud, config.voxel_size)
    timer.record("subsample", t0)

    t0 = time.perf_counter()
    patch_feats = geo_provider.patch_features(frame.cloud, patches)
    if frame.point_features is not None:
        point_feats = np.asarray(frame.point_features, dtype=np.float64)
    else:
        point_feats = geo_provider.point_features(frame.cloud, patches)
    timer.record("features", t0)

    t0 = time.perf_counter()
    mapping = project_to_pixels(patches.centers, frame.camera)
    if config.noise_sigma > 0:
        mapping = inject_pixel_noise(
            mapping, config.noise_sigma,
            derive_seed(config.seed, pair_id, "noise", tag), frame.camera,
        )
    if not mapping.valid.any():
        raise StageError("mapping", DataError("no valid patches"))
    timer.record("mapping", t0)

    t0 = time.perf_counter()
    fmap = _stage(
        "features", _resolve_feature_map, frame, patches, config,
        seed=derive_seed(config.seed, "vmap"),
    )
    timer.record("features", t0)

    t0 = time.perf_counter()
    mapping = scale_to_grid(
        mapping, (frame.camera.width, frame.camera.height), (fmap.width, fmap.height)
    )
    if not mapping.valid.any():
        raise StageError("mapping", DataError("no valid patches"))
    timer.record("mapping", t0)

    t0 = time.perf_counter()
    conv = _window_conv_from_store(store, config)
    vis_win = window_aggregate(fmap, mapping, conv)
    geom_red = reduce_channels(
        patch_feats[mapping.valid],
        store.get("fusion.reduce_g.weight"), store.get("fusion.reduce_g.bias"),
    )
    vis_red = reduce_channels(
        vis_win, store.get("fusion.reduce_v.weight"), store.get("fusion.reduce_v.bias")
    )
    fused_feats = fuse_features(
        geom_red, vis_red, config.fusion.mode,
        store.get("fusion.ffn.layer1.weight"), store.get("fusion.ffn.layer1.bias"),
        store.get("fusion.ffn.layer2.weight"), store.get("fusion.ffn.layer2.bias"),
        store.get("fusion.resize.weight"), store.get("fusion.resize.bias"),
    )
    size = np.array([frame.camera.width, frame.camera.height], dtype=np.float64)
    fused = FusedPatchSet(
        features=fused_feats,
        visual_window=vis_win,
        geom_reduced=geom_red,
        centers=patches.centers[mapping.valid],
        pixels_norm=mapping.pixels[mapping.valid] / size,
        grid_uv=mapping.grid_indices[mapping.valid],
        original_indices=np.flatnonzero(mapping.valid),
    )
    timer.record("fusion", t0)

    t0 = time.perf_counter()
    ctx = _stage(
        "attention", build_positional_context, fused.centers, fused.pixels_norm,
        store, config,
    )
    timer.record("positional", t0)
    return _ProcessedFrame(patches=patches, fused=fused,
                           point_features=point_feats, ctx=ctx)


def register(pair: PairInput, config: PipelineConfig, store: WeightStore
             ) -> RegistrationResult:
    """Run the full coarse-to-fine registration pipeline on one pair."""
    config.validate()
    validate_weights(store, tensor_specs(config))
    timer = _StageTimer()
    geo_provider = HandcraftedGeometricProvider(
        patch_dim=config.providers.geometric_channels,
        point_k=config.providers.point_neighbors,
    )

    src = _process_frame(pair.source, "source", pair.pair_id, config, store,
                         geo_provider, timer)
    tgt = _process_frame(pair.target, "target", pair.pair_id, config, store,
                         geo_provider, timer)

    t0 = time.perf_counter()
    stack = build_stack(store, config)
    refined_p, refined_q = _stage(
        "attention", stack.run, src.fused.features, tgt.fused.features,
        src.ctx, tgt.ctx,
    )
    timer.record("attention", t0)

    t0 = time.perf_counter()
    corr_valid = _stage(
        "patch_matching", match_patches, refined_p, refined_q,
        config.matching.patch_topk, config.matching.patch_temperature,
        config.matching.patch_mutual,
    )
    # lift valid-space indices back to the full patch sets
    patch_corr = PatchCorrespondences(
        src.fused.original_indices[corr_valid.p_indices],
        tgt.fused.original_indices[corr_valid.q_indices],
        corr_valid.scores,
    )
    timer.record("patch_matching", t0)

    t0 = time.perf_counter()
    point_corr = _stage(
        "point_matching", match_points,
        src.point_features, tgt.point_features,
        src.patches, tgt.patches, patch_corr,
        cap=config.matching.point_cap,
        iterations=config.matching.sinkhorn_iterations,
        slack_score=store.scalar("matching.dustbin"),
        score_scale=config.matching.point_score_scale,
        confidence_threshold=config.matching.confidence_threshold,
        seed=derive_seed(config.seed, pair.pair_id, "subsample"),
    )
    timer.record("point_matching", t0)

    t0 = time.perf_counter()
    est = _stage(
        "estimation", lgr, point_corr,
        pair.source.cloud.points, pair.target.cloud.points,
        EstimationConfig(
            acceptance_radius=config.estimation.acceptance_radius,
            refinement_iterations=config.estimation.refinement_iterations,
            min_local_matches=config.estimation.min_local_matches,
        ),
    )
    timer.record("estimation", t0)

    t0 = time.perf_counter()
    metrics = {}
    if pair.gt is not None:
        metrics["ir"] = inlier_ratio(
            point_corr, pair.source.cloud.points, pair.target.cloud.points,
            pair.gt, config.metrics.inlier_threshold,
        )
        metrics["pir"] = patch_inlier_ratio(
            patch_corr, src.patches.members(), tgt.patches.members(),
            pair.source.cloud.points, pair.target.cloud.points,
            pair.gt, config.metrics.pir_radius,
        )
        gt_pairs = gt_correspondences(
            pair.source.cloud, pair.target.cloud, pair.gt,
            config.metrics.inlier_threshold,
        )
        if len(gt_pairs[0]):
            metrics["rmse"] = registration_rmse(
                est.transform, pair.source.cloud.points,
                pair.target.cloud.points, gt_pairs,
            )
            metrics["gt_correspondences"] = int(len(gt_pairs[0]))
        rre, rte = pose_errors(est.transform, pair.gt)
        metrics["rre_deg"] = rre
        metrics["rte"] = rte
    timer.record("metrics", t0)

    counts = {
        "patches_p": len(src.patches), "patches_q": len(tgt.patches),
        "valid_patches_p": len(src.fused), "valid_patches_q": len(tgt.fused),
        "patch_matches": len(patch_corr), "point_matches": len(point_corr),
        "inliers": int(len(est.inliers)),
        "lgr_candidates": est.candidate_count,
        "refinement_inlier_history": est.inlier_history,
    }
    return RegistrationResult(
        pair_id=pair.pair_id, transform=est.transform,
        patch_matches=patch_corr, point_matches=point_corr,
        inliers=est.inliers, metrics=metrics, timing=timer.timing, counts=counts,
    )


def load_pair_record(record: dict, base_dir: Path) -> PairInput:
    """Build a PairInput from one JSONL benchmark record."""
    from .dataset import depth_to_cloud, load_depth_image  # local: avoids cycle

    def resolve(p):
        path = Path(p)
        return path if path.is_absolute() else base_dir / path

    def load_camera(value) -> CameraModel:
        if isinstance(value, dict):
            return CameraModel.from_json_dict(value)
        return CameraModel.load(resolve(value))

    def load_frame(tag: str) -> FrameInput:
        try:
            camera = load_camera(record[f"camera_{tag}"])
            if f"cloud_{tag}" in record:
                cloud = load_point_cloud(resolve(record[f"cloud_{tag}"]))
            elif f"depth_{tag}" in record:
                cloud = depth_to_cloud(
                    load_depth_image(resolve(record[f"depth_{tag}"])), camera
                )
            else:
                raise DataError(
                    f"record {record.get('id', '?')}: no cloud_{tag} or depth_{tag}"
                )
        except OSError as exc:
            raise DataError(f"record {record.get('id', '?')}: {exc}") from exc
        vfeat = record.get(f"vfeat_{tag}")
        return FrameInput(
            cloud=cloud, camera=camera,
            vfeat_path=str(resolve(vfeat)) if vfeat else None,
        )

    gt = None
    if "gt_rotation" in record:
        gt = RigidTransform(
            np.asarray(record["gt_rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(record.get("gt_translation", [0, 0, 0]), dtype=np.float64),
        )
    pair_id = str(record.get("id") or
                  f"{record.get('scene', 'pair')}:{record.get('a', '?')}-{record.get('b', '?')}")
    extra = {k: record[k] for k in ("scene", "a", "b", "overlap", "bin") if k in record}
    return PairInput(
        pair_id=pair_id, source=load_frame("a"), target=load_frame("b"),
        gt=gt, extra=extra,
    )


def load_pairs_manifest(path) -> list:
    path = Path(path)
    records = []
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
    except OSError as exc:
        raise DataError(f"cannot read pairs manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSONL ({exc})") from exc
    if not records:
        raise DataError(f"{path}: empty pairs manifest")
    return [load_pair_record(r, path.parent) for r in records]


def _aggregate(pair_records: list, config: PipelineConfig) -> dict:
    ok = [r for r in pair_records if "error" not in r]
    with_gt = [r for r in ok if "ir" in r.get("metrics", {})]
    agg = {
        "pairs_total": len(pair_records),
        "pairs_failed": len(pair_records) - len(ok),
    }
    if with_gt:
        irs = [r["metrics"]["ir"] for r in with_gt]
        agg["ir_mean"] = float(np.mean(irs))
        agg["pir_mean"] = float(np.mean([r["metrics"]["pir"] for r in with_gt]))
        agg["fmr"] = float(np.mean([
            ir > config.metrics.fmr_ir_threshold for ir in irs
        ]))
        rmses = [r["metrics"]["rmse"] for r in with_gt if "rmse" in r["metrics"]]
        if rmses:
            agg["rr"] = float(np.mean([
                rmse < config.metrics.rmse_threshold for rmse in rmses
            ]))
        pose_ok = [
            r for r in with_gt
            if r["metrics"]["rre_deg"] < config.metrics.rre_threshold_deg
            and r["metrics"]["rte"] < config.metrics.rte_threshold
        ]
        agg["pose_recall"] = len(pose_ok) / len(with_gt)
        if pose_ok:
            agg["rre_deg_mean"] = float(np.mean([r["metrics"]["rre_deg"] for r in pose_ok]))
            agg["rte_mean"] = float(np.mean([r["metrics"]["rte"] for r in pose_ok]))
    return agg


def _run_section(pairs: list, config: PipelineConfig, store: WeightStore,
                 workers: int, include_timing: bool,
                 include_correspondences: bool) -> dict:
    def run_one(pair: PairInput) -> dict:
        try:
            result = register(pair, config, store)
            rec = result.to_json_dict(include_timing=include_timing,
                                      include_correspondences=include_correspondences)
            rec.update({k: v for k, v in pair.extra.items() if k not in rec})
            return rec
        except VgregError as exc:
            logger.warning("pair %s failed: %s", pair.pair_id, exc)
            rec = {"pair_id": pair.pair_id, "error": str(exc)}
            if isinstance(exc, StageError):
                rec["stage"] = exc.stage
            return rec

    if workers <= 1:
        records = [run_one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_one, pairs))
    return {"metrics": _aggregate(records, config), "pairs": records}


def run_benchmark(pairs: list, config: PipelineConfig, store: WeightStore, *,
                  workers: Optional[int] = None, include_timing: bool = True,
                  include_correspondences: bool = True,
                  noise_sigmas: Optional[list] = None) -> dict:
    """Register every pair; optionally sweep mapping-noise sigmas into sections."""
    if not pairs:
        raise DataError("empty pairs manifest")
    config.validate()
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    report = {
        "config": config.to_json_dict(),
        "config_hash": config.hash(),
        "weights_hash": store.content_hash(),
    }
    if noise_sigmas is None:
        section = _run_section(pairs, config, store, workers, include_timing,
                               include_correspondences)
        report.update(section)
    else:
        sweep = []
        for sigma in noise_sigmas:
            cfg = PipelineConfig.from_json_dict(
                {**config.to_json_dict(), "noise_sigma": float(sigma)}
            )
            section = _run_section(pairs, cfg, store, workers, include_timing,
                                   include_correspondences)
            section["noise_sigma"] = float(sigma)
            sweep.append(section)
        report["sweep"] = sweep
    return report


def failure_fraction(report: dict) -> float:
    sections = report.get("sweep") or [report]
    worst = 0.0
    for section in sections:
        m = section["metrics"]
        if m["pairs_total"]:
            worst = max(worst, m["pairs_failed"] / m["pairs_total"])
    return worst


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n"
    )


def write_report_csv(report: dict, path) -> None:
    """One aggregate row per section, for tables."""
    sections = report.get("sweep") or [report]
    columns = ["noise_sigma", "pairs_total", "pairs_failed", "pir_mean", "ir_mean",
               "fmr", "rr", "pose_recall", "rre_deg_mean", "rte_mean"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for section in sections:
            m = dict(section["metrics"])
            m["noise_sigma"] = section.get(
                "noise_sigma", report["config"].get("noise_sigma", 0.0)
            )
            writer.writerow([m.get(c, "") for c in columns])
