"""Run a DINOv2 backbone on images and dump last-layer patch features as DRFM.

The ViT consumes images whose sides are multiples of the 14-pixel patch size;
the resize policy scales the shorter side (optional) and center-crops both
sides down to multiples of 14, recording the mapping in a sidecar JSON so
consumers can convert original pixel coordinates to feature-grid cells.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .drfm import write_drfm

logger = logging.getLogger(__name__)

PATCH_SIZE = 14

MODEL_IDS = {
    "small": "facebook/dinov2-small",
    "base": "facebook/dinov2-base",
}

EXPECTED_CHANNELS = {"small": 384, "base": 768}

# standard ImageNet statistics used by the DINOv2 processors
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class ExportJob:
    images: list
    model: str = "small"                 # small | base
    out_dir: Path = Path(".")
    weights_path: Optional[str] = None   # local checkpoint overriding the hub id
    short_side: Optional[int] = None     # scale shorter side here before cropping
    device: str = "cpu"

    def __post_init__(self):
        if self.model not in MODEL_IDS:
            raise ValueError(f"model must be one of {sorted(MODEL_IDS)}, got {self.model!r}")
        self.out_dir = Path(self.out_dir)
        self.images = [Path(p) for p in self.images]


@dataclass
class ExportResult:
    written: list = field(default_factory=list)   # (drfm_path, meta_path)
    skipped: list = field(default_factory=list)


def load_backbone(job: ExportJob):
    from transformers import Dinov2Model

    source = job.weights_path or MODEL_IDS[job.model]
    model = Dinov2Model.from_pretrained(source)
    model.eval()
    model.to(job.device)
    if model.config.patch_size != PATCH_SIZE:
        raise ValueError(
            f"checkpoint patch size {model.config.patch_size} != {PATCH_SIZE}"
        )
    if job.weights_path is None:
        expected = EXPECTED_CHANNELS[job.model]
        if model.config.hidden_size != expected:
            raise ValueError(
                f"{source}: hidden size {model.config.hidden_size}, expected {expected}"
            )
    return model


def prepare_image(image: Image.Image, short_side: Optional[int]):
    """Resize (optional) and center-crop to multiples of the patch size.

    Returns (tensor CHW float32 normalized, meta dict with the pixel mapping).
    """
    orig_w, orig_h = image.size
    if short_side is not None:
        scale = short_side / min(orig_w, orig_h)
        new_w, new_h = round(orig_w * scale), round(orig_h * scale)
        image = image.resize((new_w, new_h), Image.BICUBIC)
    else:
        new_w, new_h = orig_w, orig_h
    crop_w = (new_w // PATCH_SIZE) * PATCH_SIZE
    crop_h = (new_h // PATCH_SIZE) * PATCH_SIZE
    if crop_w == 0 or crop_h == 0:
        raise ValueError(
            f"image {orig_w}x{orig_h} smaller than one {PATCH_SIZE}px patch after resize"
        )
    off_x = (new_w - crop_w) // 2
    off_y = (new_h - crop_h) // 2
    image = image.crop((off_x, off_y, off_x + crop_w, off_y + crop_h))

    arr = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    arr = (arr - IMAGE_MEAN) / IMAGE_STD
    tensor = torch.from_numpy(arr.transpose(2, 0, 1))
    meta = {
        "original_size": [orig_w, orig_h],
        "resized_size": [new_w, new_h],
        "crop_offset": [off_x, off_y],
        "effective_size": [crop_w, crop_h],
        "grid_size": [crop_w // PATCH_SIZE, crop_h // PATCH_SIZE],
        "patch_size": PATCH_SIZE,
    }
    return tensor, meta


def extract_patch_grid(model, tensor: torch.Tensor, device: str) -> np.ndarray:
    """Last-layer patch tokens without the CLS token, as an (H', W', C) grid."""
    _, h, w = tensor.shape
    grid_h, grid_w = h // PATCH_SIZE, w // PATCH_SIZE
    with torch.no_grad():
        out = model(pixel_values=tensor[None].to(device))
    tokens = out.last_hidden_state[0].cpu()
    if tokens.shape[0] != 1 + grid_h * grid_w:
        raise ValueError(
            f"token count {tokens.shape[0]} != 1 (CLS) + {grid_h}*{grid_w} patches"
        )
    patches = tokens[1:]  # drop the CLS token
    return patches.reshape(grid_h, grid_w, -1).numpy().astype(np.float32)


def export_features(job: ExportJob, model=None) -> ExportResult:
    """Export every readable image; unreadable inputs are skipped with a log."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if model is None:
        model = load_backbone(job)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    result = ExportResult()
    for path in job.images:
        try:
            image = Image.open(path)
            image.load()
        except OSError as exc:
            logger.warning("skipping unreadable image %s: %s", path, exc)
            result.skipped.append(path)
            continue
        tensor, meta = prepare_image(image, job.short_side)
        grid = extract_patch_grid(model, tensor, job.device)
        meta["channels"] = int(grid.shape[2])
        meta["model"] = job.model
        meta["source_image"] = path.name
        drfm_path = job.out_dir / f"{path.stem}.drfm"
        meta_path = job.out_dir / f"{path.stem}.meta.json"
        write_drfm(grid, drfm_path)
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        result.written.append((drfm_path, meta_path))
        logger.info("wrote %s (%dx%dx%d)", drfm_path, *grid.shape)
    return result
