"""Bipartite interaction graph: loading, splitting, popularity buckets, binary cache."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")

UNPOPULAR, NORMAL, POPULAR = 0, 1, 2
BUCKET_NAMES = ("Unpopular", "Normal", "Popular")

GRAPH_MAGIC = b"MGF1"
_U64 = struct.Struct("<Q")


class GraphFormatError(ValueError):
    """Raised for malformed interaction files or cache files."""


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Deduplicated user-item edges with degrees and a split label per edge.

    Degrees are counted on the full edge set. ``split`` holds one of
    ``TRAIN``/``VALID``/``TEST`` per edge; a freshly loaded graph has every
    edge labelled ``TRAIN``.
    """

    num_users: int
    num_items: int
    edges: np.ndarray
    split: np.ndarray
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()
    user_degrees: np.ndarray = field(init=False)
    item_degrees: np.ndarray = field(init=False)

    def __post_init__(self):
        edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        split = np.ascontiguousarray(self.split, dtype=np.uint8)
        if split.shape != (len(edges),):
            raise ValueError("split must hold one label per edge")
        if len(edges):
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.num_users:
                raise ValueError("user index out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.num_items:
                raise ValueError("item index out of range")
        if split.size and split.max() > TEST:
            raise ValueError("unknown split label")
        edges.setflags(write=False)
        split.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "split", split)
        udeg = np.bincount(edges[:, 0], minlength=self.num_users).astype(np.int64)
        ideg = np.bincount(edges[:, 1], minlength=self.num_items).astype(np.int64)
        udeg.setflags(write=False)
        ideg.setflags(write=False)
        object.__setattr__(self, "user_degrees", udeg)
        object.__setattr__(self, "item_degrees", ideg)

    @classmethod
    def from_pairs(cls, pairs, num_users=None, num_items=None, split=None):
        """Build a graph from integer (user, item) pairs, dropping duplicates.

        Duplicates keep their first occurrence, so the edge order of the
        input is preserved.
        """
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if num_users is None:
            num_users = int(pairs[:, 0].max()) + 1 if len(pairs) else 0
        if num_items is None:
            num_items = int(pairs[:, 1].max()) + 1 if len(pairs) else 0
        keys = pairs[:, 0] * max(num_items, 1) + pairs[:, 1]
        _, first = np.unique(keys, return_index=True)
        keep = np.sort(first)
        if split is None:
            split = np.zeros(len(keep), dtype=np.uint8)
        else:
            split = np.asarray(split, dtype=np.uint8)[keep]
        return cls(num_users, num_items, pairs[keep], split)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_tokens(self) -> int:
        return self.num_users + self.num_items

    def split_edges_of(self, which: int) -> np.ndarray:
        return self.edges[self.split == which]

    def matrix(self, which: int | None = None) -> sp.csr_matrix:
        """Binary user-item matrix, optionally restricted to one split."""
        edges = self.edges if which is None else self.split_edges_of(which)
        data = np.ones(len(edges))
        return sp.csr_matrix(
            (data, (edges[:, 0], edges[:, 1])), shape=(self.num_users, self.num_items)
        )

    def token_degrees(self, source: str = "train") -> np.ndarray:
        """Degrees of all M+N tokens, users first, from the full graph or the train split."""
        if source == "full":
            return np.concatenate([self.user_degrees, self.item_degrees])
        if source != "train":
            raise ValueError(f"degree source must be 'full' or 'train', got {source!r}")
        edges = self.split_edges_of(TRAIN)
        return np.concatenate(
            [
                np.bincount(edges[:, 0], minlength=self.num_users),
                np.bincount(edges[:, 1], minlength=self.num_items),
            ]
        ).astype(np.int64)

    def with_split(self, split) -> "InteractionGraph":
        return InteractionGraph(
            self.num_users, self.num_items, self.edges, split, self.user_ids, self.item_ids
        )

    def same_as(self, other: "InteractionGraph") -> bool:
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.split, other.split)
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
        )


def load_interactions(path, format: str = "tsv_pairs") -> InteractionGraph:
    """Read ``user<TAB>item`` lines into an :class:`InteractionGraph`.

    String ids are mapped to dense indices in first-seen order. Blank lines
    and lines starting with ``#`` are skipped.
    """
    if format != "tsv_pairs":
        raise ValueError(f"unsupported format {format!r}")
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise GraphFormatError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            u = users.setdefault(parts[0], len(users))
            i = items.setdefault(parts[1], len(items))
            pairs.append((u, i))
    if not pairs:
        raise GraphFormatError(f"{path}: no interactions found")
    g = InteractionGraph.from_pairs(pairs, len(users), len(items))
    _log.info("loaded %d users, %d items, %d edges from %s", g.num_users, g.num_items, g.num_edges, path)
    return InteractionGraph(
        g.num_users, g.num_items, g.edges, g.split, tuple(users), tuple(items)
    )


def split_edges(graph: InteractionGraph, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionGraph:
    """Randomly assign each edge to train/valid/test.

    Edges are shuffled with a seeded permutation and cut at the rounded
    ratio boundaries. Afterwards every user with at least three edges is
    guaranteed a training edge, and each split with a positive ratio is made
    non-empty when the graph has at least ten edges.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,):
        raise ValueError("ratios must be (train, valid, test)")
    if np.any(ratios < 0) or np.any(ratios > 1):
        raise ValueError(f"split ratios must lie in [0, 1], got {ratios.tolist()}")
    if abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios.sum()!r}")

    rng = np.random.default_rng(seed)
    n = graph.num_edges
    order = rng.permutation(n)
    cuts = np.round(np.cumsum(ratios) * n).astype(np.int64)
    cuts[-1] = n
    labels = np.empty(n, dtype=np.uint8)
    labels[order[: cuts[0]]] = TRAIN
    labels[order[cuts[0] : cuts[1]]] = VALID
    labels[order[cuts[1] :]] = TEST

    users = graph.edges[:, 0]
    if ratios[0] > 0:
        has_train = np.zeros(graph.num_users, dtype=bool)
        has_train[users[labels == TRAIN]] = True
        needy = np.flatnonzero((graph.user_degrees >= 3) & ~has_train)
        for u in needy:
            candidates = np.flatnonzero(users == u)
            labels[rng.choice(candidates)] = TRAIN

    if n >= 10:
        for which in (VALID, TEST, TRAIN):
            if ratios[which] == 0 or np.any(labels == which):
                continue
            if which == TRAIN:
                donors = np.flatnonzero(labels != TRAIN)
            else:
                # take from users that keep at least one training edge
                train_counts = np.bincount(users[labels == TRAIN], minlength=graph.num_users)
                donors = np.flatnonzero((labels == TRAIN) & (train_counts[users] > 1))
            if len(donors):
                labels[rng.choice(donors)] = which
    return graph.with_split(labels)


@dataclass(frozen=True)
class PopularityBuckets:
    thresholds: tuple[float, float]
    bucket_of_item: np.ndarray

    def items_in(self, bucket: int) -> np.ndarray:
        return np.flatnonzero(self.bucket_of_item == bucket)


def bucket_items(graph_or_degrees, quantiles=(1 / 3, 2 / 3)) -> PopularityBuckets:
    """Split items into Unpopular / Normal / Popular by degree quantiles.

    Items at or below the first quantile are Unpopular, items strictly above
    the second are Popular, the rest Normal. Accepts a graph or a raw item
    degree vector.
    """
    q1, q2 = quantiles
    if not 0 < q1 < q2 < 1:
        raise ValueError(f"need 0 < q1 < q2 < 1, got {quantiles}")
    if isinstance(graph_or_degrees, InteractionGraph):
        degrees = np.asarray(graph_or_degrees.item_degrees)
    else:
        degrees = np.asarray(graph_or_degrees)
    if degrees.size == 0 or np.all(degrees == degrees.flat[0]):
        warnings.warn("degenerate item degree distribution; every item is Normal", stacklevel=2)
        level = float(degrees.flat[0]) if degrees.size else 0.0
        return PopularityBuckets((level, level), np.full(degrees.shape, NORMAL, dtype=np.int8))
    t1, t2 = np.quantile(degrees, [q1, q2])
    buckets = np.full(degrees.shape, NORMAL, dtype=np.int8)
    buckets[degrees <= t1] = UNPOPULAR
    buckets[degrees > t2] = POPULAR
    return PopularityBuckets((float(t1), float(t2)), buckets)


# -- binary cache -----------------------------------------------------------


def _write_strings(fh, strings):
    blob = "\n".join(strings).encode("utf-8")
    fh.write(_U64.pack(len(strings)))
    fh.write(_U64.pack(len(blob)))
    fh.write(blob)


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise GraphFormatError("truncated cache file")
    return data


def _read_u64(fh):
    return _U64.unpack(_read_exact(fh, 8))[0]


def _read_strings(fh):
    count = _read_u64(fh)
    blob = _read_exact(fh, _read_u64(fh)).decode("utf-8")
    if count == 0:
        return ()
    return tuple(blob.split("\n"))


def write_graph(fh, graph: InteractionGraph):
    """Serialize ``graph`` to an open binary file in the MGF1 layout."""
    fh.write(GRAPH_MAGIC)
    for v in (graph.num_users, graph.num_items, graph.num_edges):
        fh.write(_U64.pack(v))
    fh.write(graph.edges.astype("<u8").tobytes())
    fh.write(graph.split.astype(np.uint8).tobytes())
    _write_strings(fh, graph.user_ids)
    _write_strings(fh, graph.item_ids)


def read_graph(fh) -> InteractionGraph:
    if _read_exact(fh, 4) != GRAPH_MAGIC:
        raise GraphFormatError("not an MGF1 graph cache")
    m, n, e = (_read_u64(fh) for _ in range(3))
    edges = np.frombuffer(_read_exact(fh, 16 * e), dtype="<u8").reshape(e, 2).astype(np.int64)
    split = np.frombuffer(_read_exact(fh, e), dtype=np.uint8).copy()
    user_ids = _read_strings(fh)
    item_ids = _read_strings(fh)
    return InteractionGraph(int(m), int(n), edges, split, user_ids, item_ids)


def save_graph(path, graph: InteractionGraph):
    with open(Path(path), "wb") as fh:
        write_graph(fh, graph)


def load_graph(path) -> InteractionGraph:
    with open(Path(path), "rb") as fh:
        return read_graph(fh)
