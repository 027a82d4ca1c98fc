"""Planted two-block bipartite graphs for end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import TRAIN, InteractionGraph
from .evaluation import top_k


@dataclass(frozen=True)
class BlockGraph:
    pairs: np.ndarray
    user_block: np.ndarray
    item_block: np.ndarray
    num_users: int
    num_items: int


def make_block_graph(num_users=200, num_items=200, per_user=20, blocks=2, seed=0) -> BlockGraph:
    """Users and items split into equal blocks; users only pick items from their own block.

    Each user draws ``per_user`` distinct items uniformly from its block.
    """
    rng = np.random.default_rng(seed)
    user_block = np.arange(num_users) * blocks // num_users
    item_block = np.arange(num_items) * blocks // num_items
    pairs = []
    for u in range(num_users):
        pool = np.flatnonzero(item_block == user_block[u])
        if per_user > len(pool):
            raise ValueError("per_user exceeds block size")
        for i in rng.choice(pool, size=per_user, replace=False):
            pairs.append((u, int(i)))
    return BlockGraph(np.array(pairs, dtype=np.int64), user_block, item_block, num_users, num_items)


def write_block_tsv(path, block: BlockGraph):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# synthetic two-block interactions\n")
        for u, i in block.pairs:
            fh.write(f"u{u}\ti{i}\n")


def block_of_ids(ids, blocks_total: int, count: int) -> np.ndarray:
    """Recover block labels from ``u<index>``/``i<index>`` ids written by :func:`write_block_tsv`."""
    idx = np.array([int(s[1:]) for s in ids])
    return idx * blocks_total // count


def block_recall(user_repr, item_repr, graph: InteractionGraph, user_block, item_block, k=10) -> float:
    """Mean share of each user's top-``k`` that lands in the user's own block.

    Candidates are all items outside the user's training edges; the relevant
    set is every unobserved item of the user's block, so a hit rate of 1 means
    the top-``k`` is entirely held-out within-block items. The score is
    ``hits / min(k, |relevant|)``.
    """
    exclude = graph.matrix(TRAIN)
    topk = top_k(np.asarray(user_repr), np.asarray(item_repr), exclude, k)
    same = item_block[np.where(topk >= 0, topk, 0)] == np.asarray(user_block)[:, None]
    hits = np.sum(same & (topk >= 0), axis=1)
    observed = np.zeros(graph.num_users, dtype=np.int64)
    np.add.at(observed, graph.split_edges_of(TRAIN)[:, 0], 1)
    block_size = np.bincount(item_block)[user_block]
    n_rel = block_size - observed
    return float(np.mean(hits / np.maximum(np.minimum(k, n_rel), 1)))
