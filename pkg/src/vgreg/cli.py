"""Command-line interface: register, benchmark, dataset build, init-weights.

Exit codes: 0 ok, 2 config error, 3 data error, 4 more than half of the
benchmark pairs failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .camera import CameraModel
from .cloud_io import load_point_cloud
from .config import PipelineConfig
from .dataset import BuildParams, build_pairs, load_scene_manifest, write_pairs_jsonl
from .errors import ConfigError, DataError, VgregError
from .geometry import RigidTransform
from .pipeline import (
    WORKERS_ENV,
    FrameInput,
    PairInput,
    failure_fraction,
    load_pairs_manifest,
    register,
    run_benchmark,
    write_report_csv,
    write_report_json,
)
from .weights import INIT_MODES, init_weights, load_weights, tensor_specs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MAJORITY_FAILURE = 4

logger = logging.getLogger(__name__)


def _load_gt(path) -> RigidTransform:
    data = json.loads(Path(path).read_text())
    return RigidTransform(
        np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
        np.asarray(data.get("translation", [0, 0, 0]), dtype=np.float64),
    )


def _cmd_register(args) -> int:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig().validate()
    store = load_weights(args.weights, required=tensor_specs(config))
    pair = PairInput(
        pair_id=args.pair_id,
        source=FrameInput(
            cloud=load_point_cloud(args.source_cloud),
            camera=CameraModel.load(args.camera_a),
            vfeat_path=args.source_vfeat,
        ),
        target=FrameInput(
            cloud=load_point_cloud(args.target_cloud),
            camera=CameraModel.load(args.camera_b),
            vfeat_path=args.target_vfeat,
        ),
        gt=_load_gt(args.gt) if args.gt else None,
    )
    result = register(pair, config, store)
    payload = {
        "config": config.to_json_dict(),
        "config_hash": config.hash(),
        "weights_hash": store.content_hash(),
        "result": result.to_json_dict(),
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    logger.info("wrote %s", args.out)
    return EXIT_OK


def _cmd_benchmark(args) -> int:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig().validate()
    store = load_weights(args.weights, required=tensor_specs(config))
    pairs = load_pairs_manifest(args.pairs)
    sigmas = None
    if args.noise_sigma:
        sigmas = [float(s) for s in args.noise_sigma.split(",")]
    report = run_benchmark(
        pairs, config, store,
        workers=args.workers,
        noise_sigmas=sigmas,
        include_timing=not args.no_timing,
        include_correspondences=not args.no_correspondences,
    )
    write_report_json(report, args.out)
    if args.csv:
        write_report_csv(report, args.csv)
    logger.info("wrote %s", args.out)
    if failure_fraction(report) > 0.5:
        logger.error("more than half of the pairs failed")
        return EXIT_MAJORITY_FAILURE
    return EXIT_OK


def _cmd_dataset_build(args) -> int:
    scenes = load_scene_manifest(args.manifest)
    params = BuildParams(
        stride=args.stride,
        group_size=args.group_size,
        min_overlap=args.min_overlap,
        bins=tuple(float(b) for b in args.bins.split(",")),
        scene_cap=args.scene_cap,
        tau=args.tau,
        max_range=args.max_range,
        overlap_voxel=args.overlap_voxel,
    )
    result = build_pairs(scenes, params, base_dir=Path(args.manifest).parent)
    write_pairs_jsonl(result.records, args.out)
    logger.info("traversed %d pairs, kept %d -> %s",
                result.traversed, len(result.records), args.out)
    return EXIT_OK


def _cmd_init_weights(args) -> int:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig().validate()
    store = init_weights(config, seed=args.seed, mode=args.mode)
    store.save(args.out)
    logger.info("wrote %s (%d tensors)", args.out, len(store.tensors))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vgreg",
        description="Visual-geometric point cloud registration pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register one cloud pair")
    p.add_argument("--source-cloud", required=True)
    p.add_argument("--target-cloud", required=True)
    p.add_argument("--source-vfeat")
    p.add_argument("--target-vfeat")
    p.add_argument("--camera-a", required=True)
    p.add_argument("--camera-b", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--config")
    p.add_argument("--gt", help="optional ground-truth transform JSON")
    p.add_argument("--pair-id", default="pair")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("benchmark", help="run a pairs manifest and emit a report")
    p.add_argument("--pairs", required=True)
    p.add_argument("--config")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--noise-sigma", help="comma-separated sigma sweep, e.g. 0,5,10")
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get(WORKERS_ENV, "1")))
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--no-correspondences", action="store_true")
    p.set_defaults(func=_cmd_benchmark)

    p_ds = sub.add_parser("dataset", help="dataset tooling")
    ds_sub = p_ds.add_subparsers(dest="dataset_command", required=True)
    p = ds_sub.add_parser("build", help="build a pairs manifest from scenes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stride", type=int, default=50)
    p.add_argument("--group-size", type=int, default=60)
    p.add_argument("--min-overlap", type=float, default=0.05)
    p.add_argument("--bins", default="0.10,0.30,0.70")
    p.add_argument("--scene-cap", type=int, default=100)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--max-range", type=float, default=6.0)
    p.add_argument("--overlap-voxel", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dataset_build)

    p = sub.add_parser("init-weights", help="write a seeded weights container")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=INIT_MODES, default="random")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init_weights)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VgregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
