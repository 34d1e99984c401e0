"""Pipeline configuration: validated dataclasses, profiles, JSON round-trip.

Every field is validated at load time against the constraints of the module
it feeds, and the full config is echoed verbatim into reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .fusion import FUSION_MODES
from .transformer import ATTENTION_MODES

WINDOW_SIZES = (1, 3, 5)


@dataclass
class ProviderConfig:
    visual: str = "file"                 # file | synthetic
    geometric: str = "handcrafted"
    visual_channels: int = 384
    geometric_channels: int = 64
    point_neighbors: int = 12
    synthetic_length_scale: float = 1.0


@dataclass
class FusionConfig:
    window_size: int = 3
    mode: str = "full"
    window_channels: Optional[int] = None  # default: same as visual channels
    reduce_dim: int = 256
    ffn_hidden: int = 1024
    fused_dim: int = 512


@dataclass
class AttentionConfig:
    mode: str = "mixed"                  # none | geo | mixed
    num_layers: int = 3
    dim: int = 256                       # attention hidden size (QKV dim)
    heads: int = 4
    ffn_hidden: Optional[int] = None     # default: 2 x stream width
    pos_mlp_hidden: int = 32
    sigma_d: Optional[float] = None      # default: 2.5 x voxel size
    k_angle: int = 3
    embedding_dim: Optional[int] = None  # r_ij dim; default: dim


@dataclass
class MatchingConfig:
    patch_topk: int = 256
    patch_mutual: bool = False
    patch_temperature: float = 0.1
    point_cap: int = 64
    sinkhorn_iterations: int = 100
    point_score_scale: float = 16.0
    confidence_threshold: float = 0.05


@dataclass
class EstimationParams:
    acceptance_radius: float = 0.1
    refinement_iterations: int = 5
    min_local_matches: int = 3


@dataclass
class MetricParams:
    inlier_threshold: float = 0.1
    fmr_ir_threshold: float = 0.05
    rmse_threshold: float = 0.2
    rre_threshold_deg: float = 5.0
    rte_threshold: float = 2.0
    pir_radius: float = 0.1


@dataclass
class PipelineConfig:
    voxel_size: float = 0.2
    noise_sigma: float = 0.0
    seed: int = 0
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    estimation: EstimationParams = field(default_factory=EstimationParams)
    metrics: MetricParams = field(default_factory=MetricParams)

    # resolved defaults
    @property
    def window_channels(self) -> int:
        return self.fusion.window_channels or self.providers.visual_channels

    @property
    def stream_dim(self) -> int:
        return self.fusion.fused_dim

    @property
    def attention_ffn_hidden(self) -> int:
        return self.attention.ffn_hidden or 2 * self.stream_dim

    @property
    def sigma_d(self) -> float:
        return self.attention.sigma_d or 2.5 * self.voxel_size

    @property
    def embedding_dim(self) -> int:
        return self.attention.embedding_dim or self.attention.dim

    def validate(self) -> "PipelineConfig":
        if self.voxel_size <= 0:
            raise ConfigError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.providers.visual not in ("file", "synthetic"):
            raise ConfigError(f"unknown visual provider {self.providers.visual!r}")
        if self.providers.geometric != "handcrafted":
            raise ConfigError(f"unknown geometric provider {self.providers.geometric!r}")
        if self.fusion.window_size not in WINDOW_SIZES:
            raise ConfigError(
                f"window_size must be odd in {WINDOW_SIZES}, got {self.fusion.window_size}"
            )
        if self.fusion.mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion.mode!r}")
        if self.attention.mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.attention.mode!r}")
        if self.attention.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        d, h = self.attention.dim, self.attention.heads
        if h < 1 or d % (2 * h) != 0:
            raise ConfigError(f"attention dim {d} must be divisible by 2*heads ({2 * h})")
        if self.embedding_dim % 2 != 0:
            raise ConfigError("embedding_dim must be even")
        if self.attention.k_angle < 0:
            raise ConfigError("k_angle must be >= 0")
        if self.matching.patch_topk < 1:
            raise ConfigError("patch_topk must be >= 1")
        if self.matching.point_cap < 1:
            raise ConfigError("point_cap must be >= 1")
        if self.matching.sinkhorn_iterations < 1:
            raise ConfigError("sinkhorn_iterations must be >= 1")
        if not 0 < self.matching.confidence_threshold <= 1:
            raise ConfigError("confidence_threshold must be in (0, 1]")
        if self.estimation.acceptance_radius <= 0:
            raise ConfigError("acceptance_radius must be > 0")
        if self.estimation.refinement_iterations < 0:
            raise ConfigError("refinement_iterations must be >= 0")
        for name in ("inlier_threshold", "rmse_threshold", "pir_radius",
                     "rre_threshold_deg", "rte_threshold"):
            if getattr(self.metrics, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        return self

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json_dict(data: dict) -> "PipelineConfig":
        def build(cls, payload):
            names = {f.name: f for f in dataclasses.fields(cls)}
            kwargs = {}
            for key, value in payload.items():
                if key not in names:
                    raise ConfigError(f"unknown config field {key!r} for {cls.__name__}")
                if dataclasses.is_dataclass(_SECTION_TYPES.get(key)) and isinstance(value, dict):
                    kwargs[key] = build(_SECTION_TYPES[key], value)
                else:
                    kwargs[key] = value
            return cls(**kwargs)

        try:
            return build(PipelineConfig, data).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def load(path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return PipelineConfig.from_json_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))

    def hash(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "providers": ProviderConfig,
    "fusion": FusionConfig,
    "attention": AttentionConfig,
    "matching": MatchingConfig,
    "estimation": EstimationParams,
    "metrics": MetricParams,
}


def standard_profile() -> PipelineConfig:
    """Default dims: reduce to 256, FFN 1024/512, attention 256 with 4 heads, L=3."""
    return PipelineConfig().validate()


def super_profile() -> PipelineConfig:
    """Wider variant: reduce to 512, FFN 2048/1024, attention 512 with 8 heads."""
    cfg = PipelineConfig(
        providers=ProviderConfig(visual_channels=768),
        fusion=FusionConfig(reduce_dim=512, ffn_hidden=2048, fused_dim=1024),
        attention=AttentionConfig(dim=512, heads=8),
    )
    return cfg.validate()


PROFILES = {"standard": standard_profile, "super": super_profile}
