"""All-ranking Top-k evaluation: Recall@k and NDCG@k, overall and per popularity bucket."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import BUCKET_NAMES, TEST, TRAIN, InteractionGraph, PopularityBuckets

_log = logging.getLogger(__name__)


def rank_items(scores, exclude=()) -> np.ndarray:
    """Item indices by descending score with excluded items removed.

    Ties go to the lower item index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        order = order[~np.isin(order, np.asarray(list(exclude)))]
    return order


def recall_ndcg_at_k(ranked, relevant, k: int) -> tuple[float, float]:
    """Binary-relevance Recall@k and NDCG@k for one ranked list."""
    if k < 1:
        raise ValueError("k must be at least 1")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = 0.0
    hits = 0
    for rank, item in enumerate(list(ranked)[:k], start=1):
        if item in relevant:
            hits += 1
            dcg += 1.0 / math.log2(rank + 1)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(relevant), k) + 1))
    return hits / len(relevant), dcg / idcg


def top_k(user_repr, item_repr, exclude: sp.csr_matrix, k: int, chunk: int = 1024) -> np.ndarray:
    """Top-``k`` items per user by dot-product score, excluded entries removed.

    Rows with fewer than ``k`` candidates are padded with ``-1``.
    """
    n_users = len(user_repr)
    out = np.full((n_users, k), -1, dtype=np.int64)
    exclude = sp.csr_matrix(exclude)
    for lo in range(0, n_users, chunk):
        hi = min(lo + chunk, n_users)
        scores = user_repr[lo:hi] @ item_repr.T
        block = exclude[lo:hi].tocoo()
        scores[block.row, block.col] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        valid = np.take_along_axis(scores, order, axis=1) > -np.inf
        out[lo:hi, : order.shape[1]] = np.where(valid, order, -1)
    return out


def metrics_from_top_k(topk: np.ndarray, relevant: sp.csr_matrix, k: int):
    """Per-user (recall, ndcg) arrays; rows with no relevant items give NaN."""
    relevant = sp.csr_matrix(relevant, dtype=bool)
    rows = np.arange(len(topk))[:, None]
    safe = np.where(topk >= 0, topk, 0)
    hits = np.asarray(relevant[rows, safe].todense(), dtype=bool) & (topk >= 0)
    n_rel = np.diff(relevant.indptr)
    # math.log2 is correctly rounded; np.log2 can differ by an ulp at some ranks
    discounts = np.array([1.0 / math.log2(r) for r in range(2, k + 2)])
    # left-to-right accumulation, the same order as a per-user loop
    dcg = np.cumsum(np.where(hits, discounts, 0.0), axis=1)[:, -1]
    ideal = np.concatenate([[0.0], np.cumsum(discounts)])
    idcg = ideal[np.minimum(n_rel, k)]
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(n_rel > 0, hits.sum(axis=1) / n_rel, np.nan)
        ndcg = np.where(n_rel > 0, dcg / idcg, np.nan)
    return recall, ndcg


@dataclass
class EvalReport:
    k: int
    recall: float
    ndcg: float
    num_users_evaluated: int
    num_users_skipped: int = 0
    per_bucket: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "recall": self.recall,
            "ndcg": self.ndcg,
            "num_users_evaluated": self.num_users_evaluated,
            "num_users_skipped": self.num_users_skipped,
            "per_bucket": {
                name: {"recall": r, "ndcg": n, "users": c}
                for name, (r, n, c) in self.per_bucket.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data) -> "EvalReport":
        buckets = {
            name: (v["recall"], v["ndcg"], v["users"]) for name, v in data.get("per_bucket", {}).items()
        }
        return cls(data["k"], data["recall"], data["ndcg"], data["num_users_evaluated"],
                   data.get("num_users_skipped", 0), buckets)

    def to_table(self) -> str:
        lines = [f"{'subset':<10} {'users':>7} {'recall@' + str(self.k):>10} {'ndcg@' + str(self.k):>10}"]
        lines.append(f"{'overall':<10} {self.num_users_evaluated:>7d} {self.recall:>10.4f} {self.ndcg:>10.4f}")
        for name, (r, n, c) in self.per_bucket.items():
            lines.append(f"{name:<10} {c:>7d} {r:>10.4f} {n:>10.4f}")
        return "\n".join(lines)


def _mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


def evaluate(
    user_repr,
    item_repr,
    graph: InteractionGraph,
    buckets: PopularityBuckets | None = None,
    k: int = 20,
    which: int = TEST,
) -> EvalReport:
    """Rank every unobserved item for each user holding ``which``-split edges.

    Training items are excluded from the candidates. With ``buckets``, each
    bucket's metrics restrict a user's relevant set to that bucket's items
    and average over users with at least one such item.
    """
    relevant = graph.matrix(which)
    if relevant.nnz == 0:
        raise ValueError("evaluation split is empty")
    exclude = graph.matrix(TRAIN)
    users = np.flatnonzero(np.diff(relevant.indptr) > 0)
    candidates = graph.num_items - np.diff(exclude.indptr)[users]
    skipped = int(np.sum(candidates == 0))
    users = users[candidates > 0]
    if skipped:
        _log.warning("%d users have no candidate items and are skipped", skipped)

    user_repr = np.asarray(user_repr, dtype=np.float64)
    item_repr = np.asarray(item_repr, dtype=np.float64)
    topk = top_k(user_repr[users], item_repr, exclude[users], k)
    rel = relevant[users]
    recall, ndcg = metrics_from_top_k(topk, rel, k)
    report = EvalReport(k, _mean(recall), _mean(ndcg), len(users), skipped)
    if buckets is not None:
        for b, name in enumerate(BUCKET_NAMES):
            keep = sp.diags((buckets.bucket_of_item == b).astype(np.float64))
            rel_b = sp.csr_matrix(rel @ keep)
            rel_b.eliminate_zeros()
            r_b, n_b = metrics_from_top_k(topk, rel_b, k)
            has = ~np.isnan(r_b)
            report.per_bucket[name] = (_mean(r_b[has]), _mean(n_b[has]), int(has.sum()))
    return report
