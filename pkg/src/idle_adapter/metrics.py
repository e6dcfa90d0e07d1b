"""Full-catalog ranking and the HR@K / NDCG@K metrics (one relevant item per user)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RankingResult:
    user_id: int
    target: int
    rank: int
    top_k: tuple[int, ...] = ()


def rank_of_target(scores, target: int) -> int:
    """1-based rank of ``target``; ties go to the lower item id."""
    s = np.asarray(scores)
    st = s[target]
    return int(1 + np.sum(s > st) + np.sum(s[:target] == st))


def top_k(scores, k: int) -> tuple[int, ...]:
    s = np.asarray(scores)
    order = np.lexsort((np.arange(len(s)), -s))
    return tuple(int(i) for i in order[:k])


def rank_results(score_matrix, targets, user_ids=None, k: int = 10) -> list[RankingResult]:
    score_matrix = np.atleast_2d(np.asarray(score_matrix))
    user_ids = range(len(targets)) if user_ids is None else user_ids
    return [RankingResult(int(u), int(t), rank_of_target(row, int(t)), top_k(row, k))
            for u, t, row in zip(user_ids, targets, score_matrix)]


def _ranks(results) -> np.ndarray:
    ranks = np.array([r.rank if isinstance(r, RankingResult) else int(r) for r in results])
    if ranks.size == 0:
        raise ValueError("no ranking results to score")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    return ranks


def hit_rate_at_k(results: Sequence, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    ranks = _ranks(results)
    return int(np.sum(ranks <= k)) / len(ranks)


def ndcg_at_k(results: Sequence, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    ranks = _ranks(results)
    # exactly rounded sum: the value does not depend on user order
    return math.fsum(1.0 / math.log2(r + 1) for r in ranks.tolist() if r <= k) / len(ranks)


def metric_table(results: Sequence, ks=(5, 10)) -> dict[str, float]:
    out = {}
    for k in ks:
        out[f"HR@{k}"] = hit_rate_at_k(results, k)
        out[f"N@{k}"] = ndcg_at_k(results, k)
    return out
