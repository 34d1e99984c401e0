"""Weights container: flat little-endian binary with a JSON index header.

Layout: magic "VGWB", version u32, header length u64, UTF-8 JSON header
{"tensors": [{"name", "shape", "dtype": "f32", "offset"}, ...]} with offsets
into the payload that follows. Tensors are stored float32 and sorted by name,
so save(load(x)) is bit-identical.

Weights are trained elsewhere; this module also provides seeded random
initialization (for property tests) and the "identity_reduction" profile in
which every attention block is an exact identity through its residual and
fusion preserves the concatenated modalities, while score computations still
run with random positional weights.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .config import PipelineConfig
from .errors import ConfigError, FormatError

MAGIC = b"VGWB"
VERSION = 1

INIT_MODES = ("random", "identity_reduction")


class WeightStore:
    """Validated name -> float32 tensor map."""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = {
            name: np.ascontiguousarray(arr, dtype=np.float32)
            for name, arr in tensors.items()
        }

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def get(self, name: str, shape: Tuple[int, ...] = None) -> np.ndarray:
        if name not in self.tensors:
            raise ConfigError(f"missing tensor {name!r}")
        arr = self.tensors[name]
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise ConfigError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}"
            )
        return arr

    def scalar(self, name: str) -> float:
        return float(self.get(name, (1,))[0])

    def save(self, path) -> None:
        names = sorted(self.tensors)
        index = []
        offset = 0
        blobs = []
        for name in names:
            arr = self.tensors[name]
            blob = arr.astype("<f4").tobytes()
            index.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": offset,
            })
            blobs.append(blob)
            offset += len(blob)
        header = json.dumps({"tensors": index}, sort_keys=True,
                            separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            digest.update(name.encode())
            digest.update(self.tensors[name].astype("<f4").tobytes())
        return digest.hexdigest()[:16]


def load_weights(path, required: List[Tuple[str, Tuple[int, ...]]] = None) -> WeightStore:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError("bad magic", f"{path}: not a weights container")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise FormatError("bad version", f"{path}: unsupported version {version}")
    header_end = 16 + header_len
    if len(raw) < header_end:
        raise FormatError("truncated header", f"{path}: header extends past EOF")
    try:
        index = json.loads(raw[16:header_end].decode())["tensors"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError("bad header", f"{path}: malformed index ({exc})") from exc
    payload = raw[header_end:]
    tensors = {}
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise FormatError(
                "truncated tensor data",
                f"{path}: tensor {entry['name']!r} extends past EOF",
            )
        tensors[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f4"
        ).reshape(shape)
    store = WeightStore(tensors)
    if required is not None:
        validate_weights(store, required)
    return store


def validate_weights(store: WeightStore, required: List[Tuple[str, Tuple[int, ...]]]) -> None:
    for name, shape in required:
        store.get(name, shape)


def tensor_specs(config: PipelineConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every tensor the configured architecture reads, with its shape."""
    k = config.fusion.window_size
    c_vis = config.providers.visual_channels
    c_win = config.window_channels
    c_g = config.providers.geometric_channels
    reduce_dim = config.fusion.reduce_dim
    hidden = config.fusion.ffn_hidden
    fused = config.fusion.fused_dim
    d = config.attention.dim
    stream = config.stream_dim
    attn_hidden = config.attention_ffn_hidden
    emb = config.embedding_dim
    pos_hidden = config.attention.pos_mlp_hidden

    specs: List[Tuple[str, Tuple[int, ...]]] = []
    for p in range(k):
        for q in range(k):
            specs.append((f"fusion.window.weight[{p}][{q}]", (c_win, c_vis)))
            specs.append((f"fusion.window.bias[{p}][{q}]", (c_win,)))
    specs += [
        ("fusion.reduce_g.weight", (reduce_dim, c_g)),
        ("fusion.reduce_g.bias", (reduce_dim,)),
        ("fusion.reduce_v.weight", (reduce_dim, c_win)),
        ("fusion.reduce_v.bias", (reduce_dim,)),
        ("fusion.ffn.layer1.weight", (hidden, 2 * reduce_dim)),
        ("fusion.ffn.layer1.bias", (hidden,)),
        ("fusion.ffn.layer2.weight", (fused, hidden)),
        ("fusion.ffn.layer2.bias", (fused,)),
        ("fusion.resize.weight", (fused, 2 * reduce_dim)),
        ("fusion.resize.bias", (fused,)),
    ]
    for layer in range(config.attention.num_layers):
        for kind in ("self", "cross"):
            base = f"vgt.layer{layer}.{kind}"
            specs += [
                (f"{base}.wq", (d, stream)),
                (f"{base}.wk", (d, stream)),
                (f"{base}.wv", (d, stream)),
                (f"{base}.wo", (stream, d)),
                (f"{base}.ffn1.weight", (attn_hidden, stream)),
                (f"{base}.ffn1.bias", (attn_hidden,)),
                (f"{base}.ffn2.weight", (stream, attn_hidden)),
                (f"{base}.ffn2.bias", (stream,)),
                (f"{base}.norm1.weight", (stream,)),
                (f"{base}.norm1.bias", (stream,)),
                (f"{base}.norm2.weight", (stream,)),
                (f"{base}.norm2.bias", (stream,)),
            ]
            if kind == "cross":
                specs += [
                    (f"{base}.norm_kv.weight", (stream,)),
                    (f"{base}.norm_kv.bias", (stream,)),
                ]
    if config.attention.mode in ("geo", "mixed"):
        specs += [
            ("vgt.shared.wr", (d, emb)),
            ("vgt.geo.dist_proj.weight", (emb, emb)),
            ("vgt.geo.dist_proj.bias", (emb,)),
            ("vgt.geo.angle_proj.weight", (emb, emb)),
            ("vgt.geo.angle_proj.bias", (emb,)),
        ]
    if config.attention.mode == "mixed":
        for tag in ("mlp_p", "mlp_pprime"):
            specs += [
                (f"vgt.pos.{tag}.layer1.weight", (pos_hidden, 2)),
                (f"vgt.pos.{tag}.layer1.bias", (pos_hidden,)),
                (f"vgt.pos.{tag}.layer2.weight", (d // 2, pos_hidden)),
                (f"vgt.pos.{tag}.layer2.bias", (d // 2,)),
            ]
    specs.append(("matching.dustbin", (1,)))
    return specs


def _identity(shape: Tuple[int, ...]) -> np.ndarray:
    return np.eye(shape[0], shape[1])


def init_weights(config: PipelineConfig, seed: int, mode: str = "random") -> WeightStore:
    """Seeded initialization of every tensor the configured architecture needs."""
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown init mode {mode!r}, expected one of {INIT_MODES}")
    rng = np.random.default_rng(seed)
    k = config.fusion.window_size
    center = (k - 1) // 2
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in tensor_specs(config):
        if name == "matching.dustbin":
            # point scores are centered (perfect match = 0); a row whose best
            # candidate sits further than this many logits below perfect
            # drains into the slack instead of marrying an impostor
            tensors[name] = np.array([-2.5])
            continue
        is_norm = ".norm" in name
        is_bias = name.endswith(".bias") or "window.bias" in name
        if is_norm:
            tensors[name] = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
            continue
        if is_bias:
            tensors[name] = np.zeros(shape)
            continue
        if mode == "identity_reduction":
            if name.endswith((".wo",)) or (
                ".ffn2.weight" in name and name.startswith("vgt.")
            ):
                tensors[name] = np.zeros(shape)
                continue
            if name.startswith("fusion.window.weight"):
                tap = name[len("fusion.window.weight"):]
                tensors[name] = (
                    _identity(shape) if tap == f"[{center}][{center}]"
                    else np.zeros(shape)
                )
                continue
            if name.startswith(("fusion.reduce_", "fusion.ffn.layer", "fusion.resize")):
                tensors[name] = _identity(shape)
                continue
        fan_in = shape[-1] if len(shape) > 1 else shape[0]
        tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return WeightStore(tensors)
