"""Visual-geometric transformer: interlaced self/cross attention with mixed
2D/3D positional embeddings.

Self-attention supports three modes:
  none  - plain scaled dot-product scores
  geo   - scores get an additive query . r_hat_ij term built from relative
          3D structure (distances + neighbor angles)
  mixed - queries/keys and the query/embedding interaction are additionally
          rotated by rotary matrices derived from normalized 2D pixel
          positions, with separate angle vectors for the two interactions

The pairwise geometric embedding and the positional angle vectors are
identical for every layer, so they are computed once per registration and
cached in a PositionalContext that the whole stack shares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, VgregError
from .fusion import leaky_relu
from .geometry import knn

logger = logging.getLogger(__name__)

ATTENTION_MODES = ("none", "geo", "mixed")


def sinusoidal_embedding(values: np.ndarray, dim: int) -> np.ndarray:
    """Standard alternating sin/cos embedding: out[..., 2m] = sin(x / 10000^(2m/dim))."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal dim must be even, got {dim}")
    values = np.asarray(values, dtype=np.float64)
    m = np.arange(dim // 2)
    inv_freq = np.power(10000.0, -2.0 * m / dim)
    angles = values[..., None] * inv_freq
    out = np.empty(values.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def pairwise_geometric_embedding(centers: np.ndarray, sigma_d: float, k_angle: int,
                                 dist_w: np.ndarray, dist_b: np.ndarray,
                                 angle_w: np.ndarray, angle_b: np.ndarray,
                                 emb_dim: int) -> np.ndarray:
    """Raw pairwise structure embedding r_ij for all patch pairs.

    r_ij = dist_proj(sinusoid(d_ij / sigma_d))
         + max over the k_angle nearest neighbors n of i of
           angle_proj(sinusoid(angle(x_n - x_i, x_j - x_i)))

    The distance component is symmetric in (i, j); the angle component is not.
    """
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    if n < 2:
        raise ConfigError("geometric embedding needs at least 2 patches")
    if k_angle >= n:
        logger.warning("k_angle=%d >= patch count %d; reducing to %d", k_angle, n, n - 1)
        k_angle = n - 1

    diff = centers[:, None, :] - centers[None, :, :]
    dists = np.linalg.norm(diff, axis=2)
    r = sinusoidal_embedding(dists / sigma_d, emb_dim) @ dist_w.T + dist_b

    if k_angle >= 1:
        nbr_idx, _ = knn(centers, centers, k_angle + 1)
        nbr_idx = nbr_idx[:, 1:]  # drop self
        to_j = -diff  # to_j[i, j] = x_j - x_i
        angle_max = None
        for m in range(k_angle):
            to_n = centers[nbr_idx[:, m]] - centers  # (n, 3)
            cross = np.cross(to_n[:, None, :], to_j)
            sin_part = np.linalg.norm(cross, axis=2)
            cos_part = np.einsum("ik,ijk->ij", to_n, to_j)
            angles = np.arctan2(sin_part, cos_part)
            emb = sinusoidal_embedding(angles, emb_dim) @ angle_w.T + angle_b
            angle_max = emb if angle_max is None else np.maximum(angle_max, emb)
        r = r + angle_max
    return r


def shared_project(r: np.ndarray, w_r: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """r_hat_ij = W^R leaky(r_ij); shared across layers, computed once and cached."""
    return leaky_relu(np.asarray(r, dtype=np.float64), slope) @ np.asarray(w_r, dtype=np.float64).T


def positional_angles(pixels_norm: np.ndarray,
                      w1: np.ndarray, b1: np.ndarray,
                      w2: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Map normalized pixel positions in [0,1]^2 to d/2 rotary angles (small MLP)."""
    x = np.asarray(pixels_norm, dtype=np.float64)
    return leaky_relu(x @ np.asarray(w1, dtype=np.float64).T + b1) @ np.asarray(w2, dtype=np.float64).T + b2


def rotary_apply(angles: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply the block-diagonal rotation R(angles) to x without materializing it.

    angles: (..., d/2); x: (..., d). Block m of x is rotated by angles[..., m].
    """
    angles = np.asarray(angles, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2 * angles.shape[-1]:
        raise ConfigError(
            f"rotary dims mismatch: {angles.shape[-1]} angles for vector dim {x.shape[-1]}"
        )
    cos, sin = np.cos(angles), np.sin(angles)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = cos * x0 - sin * x1
    out[..., 1::2] = sin * x0 + cos * x1
    return out


@dataclass
class PositionalContext:
    """Per-frame cached positional quantities shared by every self-attention layer."""

    r_hat: Optional[np.ndarray] = None          # (M, M, d)
    angles_qk: Optional[np.ndarray] = None      # (M, d/2), the p vectors
    angles_qr: Optional[np.ndarray] = None      # (M, d/2), the p' vectors
    _r_hat_qr: Optional[np.ndarray] = None      # cache: R(p'_j) r_hat_ij

    def r_hat_rotated(self) -> np.ndarray:
        """r_hat with each [i, j] entry rotated by the j-side p' angles (cached)."""
        if self._r_hat_qr is None:
            self._r_hat_qr = rotary_apply(self.angles_qr[None, :, :], self.r_hat)
        return self._r_hat_qr


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(M, d) -> (heads, M, d_head)."""
    m, d = x.shape
    return x.reshape(m, heads, d // heads).transpose(1, 0, 2)


def self_attention_scores(q: np.ndarray, k: np.ndarray, heads: int, mode: str,
                          ctx: PositionalContext) -> np.ndarray:
    """Per-head score matrices (heads, M, M) for the configured mode.

    Rotations act on full vectors first (block structure aligns with head
    slicing), then heads are sliced; each head is scaled by sqrt(d_head).
    """
    if mode not in ATTENTION_MODES:
        raise ConfigError(f"unknown attention mode {mode!r}")
    d_head = q.shape[1] // heads
    scale = 1.0 / np.sqrt(d_head)

    if mode == "mixed":
        if ctx.angles_qk is None or ctx.angles_qr is None:
            raise ConfigError("mixed mode requires rotary angle context")
        q_rot = rotary_apply(ctx.angles_qk, q)
        k_rot = rotary_apply(ctx.angles_qk, k)
    else:
        q_rot, k_rot = q, k
    qh = _split_heads(q_rot, heads)
    kh = _split_heads(k_rot, heads)
    scores = np.einsum("hid,hjd->hij", qh, kh)

    if mode in ("geo", "mixed"):
        if ctx.r_hat is None:
            raise ConfigError(f"mode {mode!r} requires a geometric embedding context")
        if mode == "mixed":
            qe = rotary_apply(ctx.angles_qr, q)
            r_rot = ctx.r_hat_rotated()  # rotated by p'_j, shared across layers
        else:
            qe, r_rot = q, ctx.r_hat
        m, d = q.shape
        qeh = _split_heads(qe, heads)
        r_heads = r_rot.reshape(m, m, heads, d // heads)
        scores = scores + np.einsum("hid,ijhd->hij", qeh, r_heads)
    return scores * scale


def _layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * weight + bias


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AttentionLayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn1_w: np.ndarray
    ffn1_b: np.ndarray
    ffn2_w: np.ndarray
    ffn2_b: np.ndarray
    norm1_w: np.ndarray
    norm1_b: np.ndarray
    norm2_w: np.ndarray
    norm2_b: np.ndarray
    norm_kv_w: Optional[np.ndarray] = None  # cross layers only
    norm_kv_b: Optional[np.ndarray] = None


def _attend(scores: np.ndarray, values: np.ndarray, heads: int,
            layer_index: int) -> np.ndarray:
    if not np.isfinite(scores).all():
        raise VgregError(f"numerical failure in attention layer {layer_index}")
    attn = _softmax(scores, axis=2)
    vh = _split_heads(values, heads)
    ctx = np.einsum("hij,hjd->hid", attn, vh)
    h, m, d_head = ctx.shape
    return ctx.transpose(1, 0, 2).reshape(m, h * d_head)


def self_attention(x: np.ndarray, lw: AttentionLayerWeights, heads: int, mode: str,
                   ctx: PositionalContext, layer_index: int = 0) -> np.ndarray:
    """Pre-norm residual block: x + W^O MHA(LN(x)), then x + FFN(LN(x))."""
    a = _layer_norm(x, lw.norm1_w, lw.norm1_b)
    q, k, v = a @ lw.wq.T, a @ lw.wk.T, a @ lw.wv.T
    scores = self_attention_scores(q, k, heads, mode, ctx)
    x = x + _attend(scores, v, heads, layer_index) @ lw.wo.T
    f = _layer_norm(x, lw.norm2_w, lw.norm2_b)
    return x + leaky_relu(f @ lw.ffn1_w.T + lw.ffn1_b) @ lw.ffn2_w.T + lw.ffn2_b


def cross_attention(x_src: np.ndarray, x_tgt: np.ndarray, lw: AttentionLayerWeights,
                    heads: int, layer_index: int = 0) -> np.ndarray:
    """Queries from source, keys/values from target; no positional terms."""
    a = _layer_norm(x_src, lw.norm1_w, lw.norm1_b)
    b = _layer_norm(x_tgt, lw.norm_kv_w, lw.norm_kv_b)
    q, k, v = a @ lw.wq.T, b @ lw.wk.T, b @ lw.wv.T
    d_head = q.shape[1] // heads
    scores = np.einsum("hid,hjd->hij", _split_heads(q, heads), _split_heads(k, heads))
    scores = scores / np.sqrt(d_head)
    x = x_src + _attend(scores, v, heads, layer_index) @ lw.wo.T
    f = _layer_norm(x, lw.norm2_w, lw.norm2_b)
    return x + leaky_relu(f @ lw.ffn1_w.T + lw.ffn1_b) @ lw.ffn2_w.T + lw.ffn2_b


@dataclass
class AttentionStack:
    """L interlaced (self, self, cross, cross) blocks with shared P/Q weights."""

    self_layers: list
    cross_layers: list
    heads: int
    mode: str

    def run(self, feats_p: np.ndarray, feats_q: np.ndarray,
            ctx_p: PositionalContext, ctx_q: PositionalContext):
        """L repetitions of [self(P), self(Q), cross(P<-Q), cross(Q<-P)].

        Cross updates are computed from the same snapshot so swapping the
        (P, Q) inputs swaps the outputs exactly.
        """
        fp, fq = np.asarray(feats_p, dtype=np.float64), np.asarray(feats_q, dtype=np.float64)
        for idx, (sl, cl) in enumerate(zip(self.self_layers, self.cross_layers)):
            fp = self_attention(fp, sl, self.heads, self.mode, ctx_p, idx)
            fq = self_attention(fq, sl, self.heads, self.mode, ctx_q, idx)
            fp, fq = (
                cross_attention(fp, fq, cl, self.heads, idx),
                cross_attention(fq, fp, cl, self.heads, idx),
            )
        return fp, fq
