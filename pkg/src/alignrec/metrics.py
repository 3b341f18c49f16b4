"""Leave-one-out ranking metrics."""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError


def hit_at_k(ranked, ground_truth, K: int) -> int:
    if K < 1:
        raise ValidationError("K must be >= 1")
    return int(ground_truth in list(ranked)[:K])


def ndcg_at_k(ranked, ground_truth, K: int) -> float:
    if K < 1:
        raise ValidationError("K must be >= 1")
    ranked = list(ranked)[:K]
    if ground_truth not in ranked:
        return 0.0
    return 1.0 / math.log2(ranked.index(ground_truth) + 2)


def recall_at_k(ranked, relevant, K: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValidationError("recall needs a non-empty relevant set")
    top = set(list(ranked)[:K])
    return len(top & relevant) / len(relevant)


def positive_rank(scores, cand_ids) -> np.ndarray:
    """1-based rank of column 0 in each row of ``scores``.

    Higher scores rank first; equal scores rank the lower candidate id first.
    """
    s = np.asarray(scores)
    ids = np.asarray(cand_ids)
    s0 = s[:, :1]
    better = (s > s0) | ((s == s0) & (ids < ids[:, :1]))
    return 1 + np.sum(better[:, 1:], axis=1)


def metrics_from_ranks(ranks, ks=(5, 10, 20)) -> dict:
    """Mean Hit/NDCG/Recall@K for leave-one-out requests (one relevant item,
    so Recall@K coincides with Hit@K)."""
    r = np.asarray(ranks, dtype=np.float64)
    out = {}
    for k in ks:
        inside = r <= k
        out[f"hit@{k}"] = float(np.mean(inside)) if r.size else 0.0
        out[f"ndcg@{k}"] = float(np.mean(np.where(inside, 1.0 / np.log2(r + 1.0), 0.0))) if r.size else 0.0
        out[f"recall@{k}"] = out[f"hit@{k}"]
    return out
