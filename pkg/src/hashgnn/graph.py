"""Bipartite interaction graphs: edge-list ingestion, per-user splits and samplers.

Users and items live in one global node index space: users occupy
``[0, num_users)`` and items occupy ``[num_users, num_users + num_items)``.
Adjacency lists are stored per side in CSR form using *local* indices.
"""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Base class for graph construction failures."""


class EdgeListParseError(GraphError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyGraphError(GraphError):
    pass


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, cols[order].astype(np.int64)


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    num_users: int
    num_items: int
    user_indptr: np.ndarray
    user_indices: np.ndarray
    item_indptr: np.ndarray
    item_indices: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    timestamps: np.ndarray | None = None  # aligned with user_indices
    _edge_keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), np.diff(self.user_indptr))
        object.__setattr__(self, "_edge_keys", users * self.num_items + self.user_indices)

    @classmethod
    def from_edges(
        cls,
        users: np.ndarray,
        items: np.ndarray,
        user_ids: Iterable[str] | int,
        item_ids: Iterable[str] | int,
        timestamps: np.ndarray | None = None,
    ) -> "InteractionGraph":
        """Build a graph from local (user, item) index arrays.

        Duplicate edges are collapsed; when timestamps are given the earliest
        one is kept. Passing an int for ``user_ids``/``item_ids`` generates
        ids ``"0".."n-1"``.
        """
        user_ids = tuple(str(i) for i in range(user_ids)) if isinstance(user_ids, int) else tuple(user_ids)
        item_ids = tuple(str(i) for i in range(item_ids)) if isinstance(item_ids, int) else tuple(item_ids)
        nu, ni = len(user_ids), len(item_ids)
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise GraphError("user and item arrays differ in length")
        if users.size and (users.min() < 0 or users.max() >= nu or items.min() < 0 or items.max() >= ni):
            raise GraphError("edge index out of range")
        keys = users * ni + items
        if timestamps is not None:
            timestamps = np.asarray(timestamps, dtype=np.float64)
            order = np.lexsort((timestamps, keys))
            keys, timestamps = keys[order], timestamps[order]
            keys, first = np.unique(keys, return_index=True)
            timestamps = timestamps[first]
        else:
            keys = np.unique(keys)
        users, items = np.divmod(keys, max(ni, 1))
        user_indptr, user_indices = _csr(users, items, nu)
        item_indptr, item_indices = _csr(items, users, ni)
        return cls(nu, ni, user_indptr, user_indices, item_indptr, item_indices,
                   user_ids, item_ids, timestamps)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return int(self.user_indices.size)

    def edges(self) -> np.ndarray:
        """All edges as an ``(E, 2)`` array of local (user, item) indices, user-major order."""
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), np.diff(self.user_indptr))
        return np.stack([users, self.user_indices], axis=1)

    def user_items(self, u: int) -> np.ndarray:
        return self.user_indices[self.user_indptr[u]:self.user_indptr[u + 1]]

    def item_users(self, i: int) -> np.ndarray:
        return self.item_indices[self.item_indptr[i]:self.item_indptr[i + 1]]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    def node_degrees(self) -> np.ndarray:
        return np.concatenate([self.user_degrees(), self.item_degrees()])

    def neighbors(self, node: int) -> np.ndarray:
        """Neighbors of a global node, in global indices."""
        if node < self.num_users:
            return self.user_items(node) + self.num_users
        return self.item_users(node - self.num_users)

    def has_edges(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorised membership test for local (user, item) pairs."""
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self._edge_keys, keys)
        pos = np.minimum(pos, max(self._edge_keys.size - 1, 0))
        if self._edge_keys.size == 0:
            return np.zeros(keys.shape, dtype=bool)
        return self._edge_keys[pos] == keys

    def global_adjacency(self):
        """Symmetric ``N x N`` scipy CSR adjacency over global node indices."""
        import scipy.sparse as sp

        e = self.edges()
        rows = np.concatenate([e[:, 0], e[:, 1] + self.num_users])
        cols = np.concatenate([e[:, 1] + self.num_users, e[:, 0]])
        data = np.ones(rows.size, dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.num_nodes, self.num_nodes))

    def with_edges(self, edges: np.ndarray) -> "InteractionGraph":
        """A graph over the same node set restricted to ``edges`` (local pairs)."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        return InteractionGraph.from_edges(edges[:, 0], edges[:, 1], self.user_ids, self.item_ids)


def _open_source(source) -> BinaryIO:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "rb")
    if isinstance(source, bytes):
        return io.BytesIO(source)
    return source


def load_edge_list(source, min_degree: int = 0, sep: str | None = None) -> InteractionGraph:
    """Parse ``user<sep>item[<sep>timestamp]`` lines into a graph.

    ``source`` is a path, raw bytes or a binary stream. Lines starting with
    ``#`` and blank lines are skipped. The separator is a tab when the line
    contains one, otherwise a comma, unless ``sep`` is given. Users and items
    with fewer than ``min_degree`` interactions are removed repeatedly until
    every remaining node satisfies the bound.
    """
    stream = _open_source(source)
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    stamps: list[float] = []
    has_ts: bool | None = None
    try:
        for line_no, raw in enumerate(stream, start=1):
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError as exc:
                raise EdgeListParseError(line_no, f"invalid UTF-8 ({exc})") from None
            if not line or line.startswith("#"):
                continue
            s = sep or ("\t" if "\t" in line else ",")
            parts = [p.strip() for p in line.split(s)]
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise EdgeListParseError(line_no, f"expected user{s!r}item[{s!r}timestamp], got {line!r}")
            if has_ts is None:
                has_ts = len(parts) == 3
            if has_ts != (len(parts) == 3):
                raise EdgeListParseError(line_no, "timestamp column present on some lines only")
            if has_ts:
                try:
                    stamps.append(float(parts[2]))
                except ValueError:
                    raise EdgeListParseError(line_no, f"bad timestamp {parts[2]!r}") from None
            users.append(user_index.setdefault(parts[0], len(user_index)))
            items.append(item_index.setdefault(parts[1], len(item_index)))
    finally:
        if stream is not source:
            stream.close()

    u = np.asarray(users, dtype=np.int64)
    i = np.asarray(items, dtype=np.int64)
    ts = np.asarray(stamps, dtype=np.float64) if stamps else None
    user_ids = np.asarray(list(user_index), dtype=object)
    item_ids = np.asarray(list(item_index), dtype=object)

    if min_degree > 0 and u.size:
        # dedupe first so duplicates do not inflate degrees
        _, first = np.unique(u * len(item_ids) + i, return_index=True)
        keep = np.zeros(u.size, dtype=bool)
        keep[first] = True
        while True:
            du = np.bincount(u[keep], minlength=len(user_ids))
            di = np.bincount(i[keep], minlength=len(item_ids))
            ok = keep & (du[u] >= min_degree) & (di[i] >= min_degree)
            if ok.sum() == keep.sum():
                break
            keep = ok
        u, i = u[keep], i[keep]
        ts = ts[keep] if ts is not None else None

    if u.size == 0:
        raise EmptyGraphError("no interactions left after parsing/filtering")

    # compact the id space to nodes that still have edges, preserving first-seen order
    used_u = np.unique(u)
    used_i = np.unique(i)
    remap_u = np.full(len(user_ids), -1, dtype=np.int64)
    remap_u[used_u] = np.arange(used_u.size)
    remap_i = np.full(len(item_ids), -1, dtype=np.int64)
    remap_i[used_i] = np.arange(used_i.size)
    return InteractionGraph.from_edges(remap_u[u], remap_i[i], user_ids[used_u], item_ids[used_i], ts)


def planted_block_graph(
    num_users: int = 200,
    num_items: int = 200,
    num_blocks: int = 10,
    p_in: float = 0.3,
    p_out: float = 0.01,
    seed: int = 0,
) -> tuple[InteractionGraph, np.ndarray, np.ndarray]:
    """Synthetic bipartite graph with dense within-block and sparse cross-block edges.

    Returns the graph plus user and item block labels. Users without any
    edge receive one within-block edge so that every user is present.
    """
    rng = np.random.default_rng(seed)
    ub = np.arange(num_users) * num_blocks // num_users
    ib = np.arange(num_items) * num_blocks // num_items
    prob = np.where(ub[:, None] == ib[None, :], p_in, p_out)
    adj = rng.random((num_users, num_items)) < prob
    for u in np.flatnonzero(~adj.any(axis=1)):
        adj[u, rng.choice(np.flatnonzero(ib == ub[u]))] = True
    users, items = np.nonzero(adj)
    graph = InteractionGraph.from_edges(
        users, items, [f"u{k}" for k in range(num_users)], [f"i{k}" for k in range(num_items)]
    )
    return graph, ub, ib


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: InteractionGraph
    valid_edges: np.ndarray  # (n, 2) local (user, item)
    test_edges: np.ndarray
    rng_seed: int
    full: InteractionGraph

    def test_items_by_user(self) -> dict[int, np.ndarray]:
        return _group(self.test_edges)

    def valid_items_by_user(self) -> dict[int, np.ndarray]:
        return _group(self.valid_edges)


def _group(edges: np.ndarray) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    if len(edges) == 0:
        return out
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    users, starts = np.unique(e[:, 0], return_index=True)
    for u, chunk in zip(users, np.split(e[:, 1], starts[1:])):
        out[int(u)] = chunk
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_interactions(
    graph: InteractionGraph,
    train_frac: float = 0.7,
    valid_frac_of_train: float = 0.1,
    seed: int = 0,
    chronological: bool = False,
) -> SplitDataset:
    """Per-user random split into train / validation / test edges.

    Each user keeps ``round(train_frac * deg)`` edges (at least one) as
    train candidates; the rest are test. ``round(valid_frac_of_train *
    n_train)`` candidates move to validation, always leaving one train edge.
    With ``chronological`` the earliest interactions form the train part.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    if not 0.0 <= valid_frac_of_train < 1.0:
        raise ValueError(f"valid_frac_of_train must be in [0, 1), got {valid_frac_of_train}")
    if chronological and graph.timestamps is None:
        raise GraphError("chronological split requires timestamps")

    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    singletons = 0
    for u in range(graph.num_users):
        lo, hi = graph.user_indptr[u], graph.user_indptr[u + 1]
        items = graph.user_indices[lo:hi]
        deg = items.size
        if deg == 0:
            continue
        if deg == 1:
            singletons += 1
        if chronological:
            order = np.argsort(graph.timestamps[lo:hi], kind="stable")
        else:
            order = rng.permutation(deg)
        n_train = min(deg, max(1, _round_half_up(train_frac * deg)))
        n_valid = min(_round_half_up(valid_frac_of_train * n_train), n_train - 1)
        cand = items[order[:n_train]]
        if chronological:
            cand = cand[rng.permutation(n_train)]
        valid.append(np.stack([np.full(n_valid, u), cand[:n_valid]], axis=1))
        train.append(np.stack([np.full(n_train - n_valid, u), cand[n_valid:]], axis=1))
        rest = items[order[n_train:]]
        test.append(np.stack([np.full(rest.size, u), rest], axis=1))
    if singletons:
        logger.info("%d users with a single interaction kept entirely in train", singletons)

    def cat(parts):
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros((0, 2), dtype=np.int64)

    return SplitDataset(graph.with_edges(cat(train)), cat(valid), cat(test), seed, graph)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class PairBatch:
    """Node pairs in global indices with link labels (1 = train edge)."""

    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def pairs(self) -> list[tuple[int, int, int]]:
        return list(zip(self.left.tolist(), self.right.tolist(), self.labels.tolist()))


def _sample_non_neighbors(full: InteractionGraph, anchors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniform non-neighbor (global index) per anchor, by rejection against ``full``."""
    nu, ni = full.num_users, full.num_items
    is_user = anchors < nu
    out = np.empty(anchors.size, dtype=np.int64)
    todo = np.arange(anchors.size)
    while todo.size:
        a = anchors[todo]
        u_side = is_user[todo]
        draw = np.where(u_side, rng.integers(0, ni, size=todo.size), rng.integers(0, nu, size=todo.size))
        users = np.where(u_side, a, draw)
        items = np.where(u_side, draw, a - nu)
        bad = full.has_edges(users, items)
        out[todo] = np.where(u_side, draw + nu, draw)
        todo = todo[bad]
    return out


def _saturated(full: InteractionGraph, nodes: np.ndarray) -> np.ndarray:
    """Nodes connected to every node on the other side (no negative exists)."""
    deg = full.node_degrees()[nodes]
    other = np.where(nodes < full.num_users, full.num_items, full.num_users)
    return deg >= other


def sample_triplet_arrays(
    split: SplitDataset, anchors: np.ndarray, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised triplet sampler: ``count`` triplets per anchor.

    Anchors without train neighbors (or without any non-neighbor) are skipped.
    """
    train = split.train
    anchors = np.asarray(anchors, dtype=np.int64)
    deg = train.node_degrees()[anchors]
    anchors = anchors[(deg > 0) & ~_saturated(split.full, anchors)]
    anchors = np.repeat(anchors, count)
    if anchors.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    nu = train.num_users
    is_user = anchors < nu
    local = np.where(is_user, anchors, anchors - nu)
    indptr = np.where(is_user, train.user_indptr[np.minimum(local, nu - 1)],
                      train.item_indptr[np.minimum(local, train.num_items - 1)])
    deg = np.where(is_user, np.diff(train.user_indptr)[np.minimum(local, nu - 1)],
                   np.diff(train.item_indptr)[np.minimum(local, train.num_items - 1)])
    offset = indptr + (rng.random(anchors.size) * deg).astype(np.int64)
    pos = np.where(is_user, train.user_indices[np.minimum(offset, train.user_indices.size - 1)] + nu,
                   train.item_indices[np.minimum(offset, train.item_indices.size - 1)])
    neg = _sample_non_neighbors(split.full, anchors, rng)
    return anchors, pos, neg


def sample_triplets(split: SplitDataset, node: int, count: int, rng: np.random.Generator) -> list[Triplet]:
    a, p, n = sample_triplet_arrays(split, np.array([node]), count, rng)
    return [Triplet(*t) for t in zip(a.tolist(), p.tolist(), n.tolist())]


def sample_edge_batch(
    split: SplitDataset, batch_size: int, neg_per_pos: int, rng: np.random.Generator
) -> PairBatch:
    """``batch_size`` uniform train edges, each followed by ``neg_per_pos`` corrupted-item negatives."""
    train = split.train
    if train.num_edges == 0:
        raise EmptyGraphError("train graph has no edges")
    nu = train.num_users
    idx = rng.integers(0, train.num_edges, size=batch_size)
    users = np.searchsorted(train.user_indptr, idx, side="right") - 1
    items = train.user_indices[idx] + nu
    neg_users = np.repeat(users, neg_per_pos)
    neg_users = neg_users[~_saturated(split.full, neg_users)]
    neg_items = _sample_non_neighbors(split.full, neg_users, rng)
    left = np.concatenate([users, neg_users])
    right = np.concatenate([items, neg_items])
    labels = np.concatenate([np.ones(users.size, dtype=np.int8), np.zeros(neg_users.size, dtype=np.int8)])
    return PairBatch(left, right, labels)
