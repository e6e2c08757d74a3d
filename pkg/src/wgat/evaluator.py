"""Full-ranking top-K evaluation with train-item masking.

Every item a user has not interacted with in training is a candidate. Scores
are -W2 between the user's and the item's final Gaussian embeddings, so an
item with the same distribution as the user scores 0, the maximum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gauss
from .graph import InteractionGraph, InteractionSet

log = logging.getLogger(__name__)

USER_CHUNK = 1024


@dataclass
class Ranking:
    """Top-K lists for a set of users; rows shorter than K are padded with -1."""

    users: np.ndarray
    items: np.ndarray
    scores: np.ndarray
    lengths: np.ndarray

    @property
    def short(self) -> np.ndarray:
        return self.lengths < self.items.shape[1]

    def top(self, row: int) -> np.ndarray:
        return self.items[row, : self.lengths[row]]


@dataclass
class RankingResult:
    recall: float
    ndcg: float
    users: np.ndarray
    user_recall: np.ndarray
    user_ndcg: np.ndarray
    ranking: Ranking
    k: int

    def per_user_csv(self) -> str:
        lines = ["user_id,recall,ndcg"]
        for u, r, n in zip(self.users, self.user_recall, self.user_ndcg):
            lines.append(f"{u},{r!r},{n!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (f"users={len(self.users)} recall@{self.k}={self.recall:.6f} "
                f"ndcg@{self.k}={self.ndcg:.6f}")


def top_k(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise top-k of a score block; -inf entries are never returned.

    Ties go to the lower column index. Returns (items, scores, lengths) with
    items padded by -1 where fewer than k finite scores exist.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_rows, n_cols = scores.shape
    k_eff = min(k, n_cols)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k_eff]
    picked = np.take_along_axis(scores, order, axis=1)
    valid = np.isfinite(picked)
    items = np.full((n_rows, k), -1, dtype=np.int64)
    out_scores = np.full((n_rows, k), -np.inf)
    items[:, :k_eff] = np.where(valid, order, -1)
    out_scores[:, :k_eff] = picked
    return items, out_scores, valid.sum(axis=1)


def _train_mask(graph: InteractionGraph, users: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(row, item) coordinates of training interactions for the given users."""
    rows, cols = [], []
    for r, u in enumerate(users):
        nbrs = graph.user_neighbors(int(u))
        rows.append(np.full(len(nbrs), r))
        cols.append(nbrs)
    if not rows:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(rows), np.concatenate(cols)


def _rank_users(score_block: Callable, graph: InteractionGraph, users: np.ndarray,
                k: int) -> Ranking:
    parts = []
    for lo in range(0, len(users), USER_CHUNK):
        chunk = users[lo: lo + USER_CHUNK]
        scores = np.array(score_block(chunk), dtype=np.float64)
        rows, cols = _train_mask(graph, chunk)
        scores[rows, cols] = -np.inf
        parts.append(top_k(scores, k))
    if not parts:
        empty = np.empty((0, k))
        return Ranking(users, empty.astype(np.int64), empty, np.empty(0, np.int64))
    items, scores, lengths = (np.concatenate(p) for p in zip(*parts))
    n_short = int(np.sum(lengths < k))
    if n_short:
        log.warning("%d users have fewer than %d unmasked items; their lists are short",
                    n_short, k)
    return Ranking(users, items, scores, lengths)


def w2_scorer(mean: np.ndarray, var: np.ndarray, num_users: int) -> Callable:
    """Score function over joint node tables (users first, then items)."""
    item_mean, item_var = mean[num_users:], var[num_users:]

    def score(users):
        return -gauss.w2_squared_pairwise(mean[users], var[users], item_mean, item_var)

    return score


def popularity_scorer(graph: InteractionGraph) -> Callable:
    """Item training degree as the score for every user."""
    pop = graph.item_degrees().astype(np.float64)
    return lambda users: np.broadcast_to(pop, (len(users), len(pop)))


def rank_items(user: int, mean: np.ndarray, var: np.ndarray, graph: InteractionGraph,
               k: int = 20) -> tuple[np.ndarray, np.ndarray, bool]:
    """Top-k (items, scores, short_flag) for one user."""
    ranking = _rank_users(w2_scorer(mean, var, graph.num_users), graph,
                          np.array([user]), k)
    n = ranking.lengths[0]
    return ranking.items[0, :n], ranking.scores[0, :n], bool(ranking.short[0])


def rank_all(mean: np.ndarray, var: np.ndarray, graph: InteractionGraph,
             k: int = 20) -> Ranking:
    """Top-k lists for every user that has at least one training interaction."""
    users = np.flatnonzero(graph.user_degrees() > 0)
    return _rank_users(w2_scorer(mean, var, graph.num_users), graph, users, k)


def recall_at_k(topk, test_items) -> float:
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise ValueError("recall is undefined for an empty test set")
    hits = sum(1 for i in np.asarray(topk).tolist() if i in test)
    return hits / len(test)


def ndcg_at_k(topk, test_items, k: int | None = None) -> float:
    """Binary-relevance NDCG with a log2(rank + 1) discount.

    The ideal DCG counts min(k, |test|) hits, where k defaults to the list length.
    """
    test = set(np.asarray(test_items).tolist())
    if not test:
        raise ValueError("NDCG is undefined for an empty test set")
    topk = np.asarray(topk).tolist()
    k = len(topk) if k is None else k
    dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(topk) if i in test)
    ideal = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(test))))
    return float(dcg / ideal) if ideal > 0 else 0.0


def held_out_by_user(test: InteractionSet) -> dict[int, np.ndarray]:
    order = np.lexsort((test.items, test.users))
    users, items = test.users[order], test.items[order]
    uniq, starts = np.unique(users, return_index=True)
    groups = np.split(items, starts[1:])
    return {int(u): np.unique(g) for u, g in zip(uniq, groups)}


def evaluate_scores(score_block: Callable, graph: InteractionGraph, test: InteractionSet,
                    k: int = 20) -> RankingResult:
    """Average Recall@k / NDCG@k over users with at least one test item."""
    held = held_out_by_user(test)
    users = np.array(sorted(u for u in held if u < graph.num_users), dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no evaluable users: every user has an empty test set")
    ranking = _rank_users(score_block, graph, users, k)
    recall = np.empty(len(users))
    ndcg = np.empty(len(users))
    for r, u in enumerate(users):
        top = ranking.top(r)
        recall[r] = recall_at_k(top, held[int(u)])
        ndcg[r] = ndcg_at_k(top, held[int(u)], k)
    return RankingResult(float(recall.mean()), float(ndcg.mean()), users, recall, ndcg,
                         ranking, k)


def evaluate_all(mean: np.ndarray, var: np.ndarray, graph: InteractionGraph,
                 test: InteractionSet, k: int = 20) -> RankingResult:
    return evaluate_scores(w2_scorer(mean, var, graph.num_users), graph, test, k)


def popularity_baseline(graph: InteractionGraph, test: InteractionSet,
                        k: int = 20) -> RankingResult:
    return evaluate_scores(popularity_scorer(graph), graph, test, k)
