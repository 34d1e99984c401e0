"""CLI: export DINOv2 patch features for a directory or list of images."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .exporter import MODEL_IDS, ExportJob, export_features

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tiff", ".webp"}


def collect_images(spec: str) -> list:
    path = Path(spec)
    if path.is_dir():
        return sorted(
            p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
    return [path]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dino-export",
        description="Export DINOv2 last-layer patch features as DRFM files",
    )
    parser.add_argument("--images", required=True,
                        help="image file or directory of images")
    parser.add_argument("--model", choices=sorted(MODEL_IDS), default="small")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--weights-path",
                        help="local checkpoint directory (overrides the hub id)")
    parser.add_argument("--short-side", type=int,
                        help="scale the shorter side to this many pixels before cropping")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    images = collect_images(args.images)
    if not images:
        print(f"no images found under {args.images}", file=sys.stderr)
        return 3
    job = ExportJob(
        images=images, model=args.model, out_dir=Path(args.out),
        weights_path=args.weights_path, short_side=args.short_side,
        device=args.device,
    )
    try:
        result = export_features(job)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not result.written:
        print("no images could be exported", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
