"""User-item bipartite graph: k-core filtering, splitting and adjacency."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class InteractionSet:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray = None
    role: str = "all"

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.timestamps is None:
            self.timestamps = np.zeros(len(self.users), dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise ValueError("users, items and timestamps must have equal length")

    def __len__(self):
        return len(self.users)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def subset(self, mask, role=None) -> "InteractionSet":
        return InteractionSet(self.users[mask], self.items[mask], self.timestamps[mask],
                              role or self.role)


def k_core_filter(interactions: InteractionSet, k: int, trace: list | None = None) -> InteractionSet:
    """Maximal subset where every surviving user and item has at least k interactions.

    Repeatedly drops edges touching under-degree nodes until nothing changes.
    ``trace`` (if given) receives ``(users, items, edges)`` after each pass.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    users, items = interactions.users, interactions.items
    keep = np.ones(len(users), dtype=bool)
    while True:
        u, i = users[keep], items[keep]
        du = np.bincount(u, minlength=users.max() + 1 if len(users) else 0)
        di = np.bincount(i, minlength=items.max() + 1 if len(items) else 0)
        ok = (du[users] >= k) & (di[items] >= k) & keep
        if trace is not None:
            trace.append((len(np.unique(users[ok])), len(np.unique(items[ok])), int(ok.sum())))
        if np.array_equal(ok, keep):
            break
        keep = ok
    if not keep.any():
        log.warning("k-core filter with k=%d removed every interaction", k)
    return interactions.subset(keep)


def split_interactions(interactions: InteractionSet, ratio: float = 0.8, seed: int = 0):
    """Per-user random split: ceil(ratio * n_u) interactions go to train.

    Users with n_u >= 2 always keep at least one train and one test item; users
    with a single interaction go entirely to train and are therefore not
    evaluable.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    users = interactions.users
    n = len(users)
    rng = np.random.default_rng(seed)
    # canonical order first so the split does not depend on input order
    canon = np.lexsort((interactions.items, users))
    keys = rng.random(n)
    order = canon[np.lexsort((keys, users[canon]))]
    sorted_users = users[order]
    counts = np.bincount(users, minlength=(users.max() + 1) if n else 0)
    starts = np.concatenate([[0], np.cumsum(counts)])[:-1]
    rank = np.arange(n) - starts[sorted_users]
    n_u = counts[sorted_users]
    n_train = np.ceil(ratio * n_u - 1e-12).astype(np.int64)
    n_train = np.where(n_u >= 2, np.clip(n_train, 1, n_u - 1), n_u)
    is_train = np.zeros(n, dtype=bool)
    is_train[order] = rank < n_train
    return interactions.subset(is_train, "train"), interactions.subset(~is_train, "test")


@dataclass
class InteractionGraph:
    """Undirected bipartite graph in a joint node space.

    Users occupy node ids [0, num_users) and items [num_users, num_users +
    num_items). ``edge_users`` / ``edge_items`` list each undirected edge once
    (item ids local); ``indptr`` / ``indices`` is the symmetric compressed-row
    adjacency over joint node ids with sorted neighbour lists.
    """

    num_users: int
    num_items: int
    edge_users: np.ndarray
    edge_items: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    entry_edge: np.ndarray = field(repr=False)
    transpose_perm: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return len(self.edge_users)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def isolated(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 0)

    @property
    def entry_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    @property
    def edge_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Joint node ids (user, item) of each undirected edge."""
        return self.edge_users, self.edge_items + self.num_users

    def user_neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]] - self.num_users

    def item_neighbors(self, i: int) -> np.ndarray:
        node = self.num_users + i
        return self.indices[self.indptr[node]:self.indptr[node + 1]]

    def user_degrees(self) -> np.ndarray:
        return self.degrees[: self.num_users]

    def item_degrees(self) -> np.ndarray:
        return self.degrees[self.num_users:]

    def has_edges(self, users, items) -> np.ndarray:
        """Vectorised membership test for (user, item) pairs."""
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items)
        edge_keys = self.edge_users * self.num_items + self.edge_items
        pos = np.searchsorted(edge_keys, keys)
        pos = np.minimum(pos, len(edge_keys) - 1)
        return (len(edge_keys) > 0) & (edge_keys[pos] == keys)


def build_graph(train: InteractionSet, num_users: int | None = None,
                num_items: int | None = None) -> InteractionGraph:
    users = np.asarray(train.users, dtype=np.int64)
    items = np.asarray(train.items, dtype=np.int64)
    if num_users is None:
        num_users = int(users.max()) + 1 if len(users) else 0
    if num_items is None:
        num_items = int(items.max()) + 1 if len(items) else 0
    if len(users) and (users.min() < 0 or users.max() >= num_users
                       or items.min() < 0 or items.max() >= num_items):
        raise ValueError("interaction ids out of range for the given counts")

    keys = np.unique(users * num_items + items)
    if len(keys) < len(users):
        log.info("build_graph: dropped %d duplicate edges", len(users) - len(keys))
    eu = keys // num_items
    ei = keys % num_items
    n_edges = len(keys)
    n_nodes = num_users + num_items

    src = np.concatenate([eu, ei + num_users])
    dst = np.concatenate([ei + num_users, eu])
    eid = np.concatenate([np.arange(n_edges), np.arange(n_edges)])
    order = np.lexsort((dst, src))
    src, dst, eid = src[order], dst[order], eid[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n_nodes), out=indptr[1:])

    # entry (u -> i) and entry (i -> u) of the same edge are each other's transpose
    first = np.empty(n_edges, dtype=np.int64)
    second = np.empty(n_edges, dtype=np.int64)
    is_user_row = src < num_users
    first[eid[is_user_row]] = np.flatnonzero(is_user_row)
    second[eid[~is_user_row]] = np.flatnonzero(~is_user_row)
    perm = np.empty(2 * n_edges, dtype=np.int64)
    perm[first] = second
    perm[second] = first

    return InteractionGraph(
        num_users=int(num_users),
        num_items=int(num_items),
        edge_users=eu,
        edge_items=ei,
        indptr=indptr,
        indices=dst.astype(np.int64),
        entry_edge=eid,
        transpose_perm=perm,
    )

