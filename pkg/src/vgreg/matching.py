"""Coarse patch matching and fine point matching via optimal transport.

Patch matching: dual-normalized similarities (row-softmax x column-softmax of
exp-scaled inner products on L2-normalized features), global top-k selection.
Point matching: per matched patch pair, Sinkhorn with a slack (dustbin)
row/column over scaled inner products of dense point features, mutual top-1
extraction and a confidence threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .geometry import PatchSet

logger = logging.getLogger(__name__)


@dataclass
class PatchCorrespondences:
    """Coarse matches (P patch index, Q patch index, score), scores descending."""

    p_indices: np.ndarray
    q_indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.p_indices = np.asarray(self.p_indices, dtype=np.int64)
        self.q_indices = np.asarray(self.q_indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("patch correspondence scores must be descending")
        pairs = set(zip(self.p_indices.tolist(), self.q_indices.tolist()))
        if len(pairs) != len(self.p_indices):
            raise ValueError("duplicate patch pairs")

    def __len__(self) -> int:
        return len(self.p_indices)


@dataclass
class PointCorrespondences:
    """Fine matches with confidences and the originating patch pair per match."""

    p_indices: np.ndarray
    q_indices: np.ndarray
    confidences: np.ndarray
    source_patch_p: np.ndarray
    source_patch_q: np.ndarray

    def __post_init__(self):
        for name in ("p_indices", "q_indices", "source_patch_p", "source_patch_q"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        if len(self.confidences) and (
            self.confidences.min() <= 0 or self.confidences.max() > 1 + 1e-9
        ):
            raise ValueError("confidences must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.p_indices)

    @staticmethod
    def empty() -> "PointCorrespondences":
        z = np.zeros(0, dtype=np.int64)
        return PointCorrespondences(z, z, np.zeros(0), z, z)


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def match_patches(feats_p: np.ndarray, feats_q: np.ndarray, k: int,
                  temperature: float = 0.1, mutual: bool = False) -> PatchCorrespondences:
    """Global top-k patch pairs under dual-normalized feature similarity."""
    feats_p = _l2_normalize(np.asarray(feats_p, dtype=np.float64))
    feats_q = _l2_normalize(np.asarray(feats_q, dtype=np.float64))
    if feats_p.shape[0] == 0 or feats_q.shape[0] == 0:
        raise ValueError("patch matching requires non-empty feature sets")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = feats_p.shape[0] * feats_q.shape[0]
    if k > total:
        logger.warning("top-k %d exceeds pair count %d; clamping", k, total)
        k = total

    logits = feats_p @ feats_q.T / temperature
    row = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    col = np.exp(logits - logsumexp(logits, axis=0, keepdims=True))
    dual = row * col

    flat = dual.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:k]
    pi, qi = np.unravel_index(order, dual.shape)
    scores = flat[order]

    if mutual:
        keep = (dual[pi, qi] >= dual[pi, :].max(axis=1)) & (
            dual[pi, qi] >= dual[:, qi].max(axis=0)
        )
        pi, qi, scores = pi[keep], qi[keep], scores[keep]
    return PatchCorrespondences(pi, qi, scores)


def sinkhorn(scores: np.ndarray, iterations: int, slack: bool = True,
             slack_score: float = 1.0) -> np.ndarray:
    """Log-domain Sinkhorn normalization; returns the assignment matrix.

    With slack=True the matrix is (m+1) x (n+1): an extra row/column filled
    with slack_score absorbs unmatched points; only the non-slack rows and
    columns are normalized. The returned non-slack rows sum to 1 (a final row
    normalization ends the iteration).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("sinkhorn scores contain NaN")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    m, n = scores.shape
    if slack:
        z = np.full((m + 1, n + 1), float(slack_score))
        z[:m, :n] = scores
    else:
        z = scores.copy()
    for _ in range(iterations):
        z[:m] -= logsumexp(z[:m], axis=1, keepdims=True)
        z[:, :n] -= logsumexp(z[:, :n], axis=0, keepdims=True)
    z[:m] -= logsumexp(z[:m], axis=1, keepdims=True)
    return np.exp(z)


_PAD = -1.0e9  # log-domain padding: exp(_PAD) is exactly 0 in float64


def _sinkhorn_batched(score_blocks: list, iterations: int,
                      slack_score: float) -> list:
    """Slack-augmented Sinkhorn over many small score matrices at once.

    Same iteration as sinkhorn(slack=True) for each block; blocks are padded
    into one (B, R+1, C+1) tensor with log-domain -inf-like padding so the
    padded cells carry zero mass and cannot disturb the real rows/columns.
    """
    if not score_blocks:
        return []
    rows = max(b.shape[0] for b in score_blocks)
    cols = max(b.shape[1] for b in score_blocks)
    batch = np.full((len(score_blocks), rows + 1, cols + 1), _PAD)
    for idx, block in enumerate(score_blocks):
        m, n = block.shape
        batch[idx, :m, :n] = block
        batch[idx, :m, cols] = slack_score   # slack column
        batch[idx, rows, :n] = slack_score   # slack row
        batch[idx, rows, cols] = slack_score
    row_mask = np.stack([
        (np.arange(rows) < b.shape[0]) for b in score_blocks
    ])[:, :, None]
    col_mask = np.stack([
        (np.arange(cols) < b.shape[1]) for b in score_blocks
    ])[:, None, :]

    def lse(z, axis):
        m = z.max(axis=axis, keepdims=True)
        return m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))

    for _ in range(iterations):
        batch[:, :rows, :] -= np.where(row_mask, lse(batch[:, :rows, :], 2), 0.0)
        batch[:, :, :cols] -= np.where(col_mask, lse(batch[:, :, :cols], 1), 0.0)
    batch[:, :rows, :] -= np.where(row_mask, lse(batch[:, :rows, :], 2), 0.0)
    out = np.exp(batch)
    return [
        out[idx][list(range(b.shape[0])) + [rows], :][:, list(range(b.shape[1])) + [cols]]
        for idx, b in enumerate(score_blocks)
    ]


def _mutual_top1(assignment: np.ndarray) -> np.ndarray:
    """(p, q) local index pairs that are argmax of both their row and column."""
    if assignment.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    best_j = np.argmax(assignment, axis=1)
    best_i = np.argmax(assignment, axis=0)
    rows = np.arange(assignment.shape[0])
    keep = best_i[best_j[rows]] == rows
    return np.stack([rows[keep], best_j[rows[keep]]], axis=1)


def match_points(point_feats_p: np.ndarray, point_feats_q: np.ndarray,
                 patches_p: PatchSet, patches_q: PatchSet,
                 patch_corr: PatchCorrespondences, *,
                 cap: int = 64, iterations: int = 100, slack_score: float = -2.5,
                 score_scale: float = 16.0, confidence_threshold: float = 0.05,
                 seed: int = 0) -> PointCorrespondences:
    """Fine matching inside each coarse patch pair; output sorted canonically."""
    members_p = patches_p.members()
    members_q = patches_q.members()
    groups = []
    blocks = []
    for pair_idx in range(len(patch_corr)):
        pi = int(patch_corr.p_indices[pair_idx])
        qi = int(patch_corr.q_indices[pair_idx])
        mp, mq = members_p[pi], members_q[qi]
        if len(mp) == 0 or len(mq) == 0:
            continue
        if len(mp) > cap:
            rng = np.random.default_rng([seed, pi, qi, 0])
            mp = np.sort(rng.choice(mp, size=cap, replace=False))
        if len(mq) > cap:
            rng = np.random.default_rng([seed, pi, qi, 1])
            mq = np.sort(rng.choice(mq, size=cap, replace=False))
        groups.append((pi, qi, mp, mq))
        # center perfect similarity at zero so the dustbin score has an
        # absolute meaning: rows whose best candidate falls more than
        # |dustbin| logits short of a perfect match drain into the slack
        blocks.append((point_feats_p[mp] @ point_feats_q[mq].T - 1.0) * score_scale)
        if np.isnan(blocks[-1]).any():
            raise ValueError("point match scores contain NaN")

    out_p, out_q, out_conf, out_sp, out_sq = [], [], [], [], []
    assignments = _sinkhorn_batched(blocks, iterations, slack_score)
    for (pi, qi, mp, mq), assignment in zip(groups, assignments):
        inner = assignment[:-1, :-1]
        for a, b in _mutual_top1(inner):
            conf = float(inner[a, b])
            if conf >= confidence_threshold:
                out_p.append(int(mp[a]))
                out_q.append(int(mq[b]))
                out_conf.append(min(conf, 1.0))
                out_sp.append(pi)
                out_sq.append(qi)
    if not out_p:
        return PointCorrespondences.empty()
    order = np.lexsort((out_sq, out_sp, out_q, out_p))
    return PointCorrespondences(
        np.asarray(out_p)[order], np.asarray(out_q)[order],
        np.asarray(out_conf)[order], np.asarray(out_sp)[order],
        np.asarray(out_sq)[order],
    )


def dump_point_matches_jsonl(matches: PointCorrespondences, fh) -> None:
    for i in range(len(matches)):
        fh.write(json.dumps({
            "pi": int(matches.p_indices[i]),
            "qi": int(matches.q_indices[i]),
            "conf": float(matches.confidences[i]),
        }) + "\n")


def dump_patch_matches_jsonl(matches: PatchCorrespondences, fh) -> None:
    for i in range(len(matches)):
        fh.write(json.dumps({
            "Pi": int(matches.p_indices[i]),
            "Qi": int(matches.q_indices[i]),
            "score": float(matches.scores[i]),
        }) + "\n")
