"""Encoding and exhaustive retrieval in Hamming and continuous space.

Three query modes over a pool of item rows:

* ``hamr``: rank by Hamming distance of packed codes (XOR + popcount),
* ``ces``:  rank by inner product of continuous embeddings,
* ``hies``: Hamming shortlist of ``m`` items re-ranked by inner product.

Every mode breaks ties by ascending item index.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .encoder import encode_nodes, mean_operator
from .hashing import hash_forward, pack_codes, unpack_codes, words_for

logger = logging.getLogger(__name__)

MODES = ("hamr", "hies", "ces")


@dataclass(frozen=True, eq=False)
class CodeMatrix:
    packed: np.ndarray  # (n, ceil(k/64)) uint64
    bits: int

    def __post_init__(self):
        if self.packed.ndim != 2 or self.packed.shape[1] != words_for(self.bits):
            raise ValueError(f"packed shape {self.packed.shape} inconsistent with {self.bits} bits")

    @classmethod
    def from_embeddings(cls, z: np.ndarray) -> "CodeMatrix":
        return cls(pack_codes(z), z.shape[1])

    @property
    def n(self) -> int:
        return self.packed.shape[0]

    def unpack(self, dtype=np.float32) -> np.ndarray:
        return unpack_codes(self.packed, self.bits, dtype)

    def rows(self, sl) -> "CodeMatrix":
        return CodeMatrix(np.ascontiguousarray(self.packed[sl]), self.bits)


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    values: np.ndarray  # (n, k) float32

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def rows(self, sl) -> "EmbeddingMatrix":
        return EmbeddingMatrix(np.ascontiguousarray(self.values[sl]))


@dataclass
class RetrievalResult:
    indices: np.ndarray
    scores: np.ndarray
    mode: str
    elapsed: float = 0.0


def encode_all(model, graph) -> tuple[CodeMatrix, EmbeddingMatrix]:
    """Codes and embeddings for every node, with no guidance mixing.

    ``model`` is a TrainedModel or ModelParams; ``graph`` is the graph the
    encoder aggregates over (the training graph).
    """
    params = getattr(model, "params", model)
    if graph.num_nodes != params.gcn.features.shape[0]:
        raise ValueError(f"model has {params.gcn.features.shape[0]} nodes, graph has {graph.num_nodes}")
    m = mean_operator(graph, params.gcn.features.dtype)
    z = hash_forward(params.hash, encode_nodes(params.gcn, m)).astype(np.float32)
    return CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)


def hamming_distance(row_a: np.ndarray, row_b: np.ndarray) -> int:
    row_a, row_b = np.asarray(row_a, dtype=np.uint64), np.asarray(row_b, dtype=np.uint64)
    if row_a.shape != row_b.shape:
        raise ValueError("packed rows differ in length")
    return int(np.bitwise_count(row_a ^ row_b).sum())


def hamming_distances(query: np.ndarray, items: CodeMatrix) -> np.ndarray:
    """Distance from one packed query row to every item row."""
    query = np.asarray(query, dtype=np.uint64).reshape(-1)
    if query.size != items.packed.shape[1]:
        raise ValueError("query word count does not match code matrix")
    if query.size == 1:
        return np.bitwise_count(items.packed[:, 0] ^ query[0]).astype(np.int32)
    return np.bitwise_count(items.packed ^ query).sum(axis=1, dtype=np.int32)


def _check_top(top: int, n_avail: int, what: str) -> int:
    if top > n_avail:
        logger.warning("%s=%d exceeds %d available items; truncating", what, top, n_avail)
        return n_avail
    return top


def _smallest_int(d: np.ndarray, k: int, max_value: int) -> np.ndarray:
    """Indices of the ``k`` smallest small non-negative ints, ties by index."""
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    cum = np.cumsum(np.bincount(d, minlength=max_value + 1))
    thresh = int(np.searchsorted(cum, k))
    cand = np.flatnonzero(d <= thresh)
    return cand[np.argsort(d[cand], kind="stable")][:k]


def _largest_float(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties by index."""
    n = s.size
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        thresh = np.partition(s, n - k)[n - k]
        cand = np.flatnonzero(s >= thresh)
    else:
        cand = np.arange(n)
    return cand[np.argsort(-s[cand], kind="stable")][:k]


def _exclude_mask(n: int, exclude) -> np.ndarray | None:
    if exclude is None or len(exclude) == 0:
        return None
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(list(exclude) if isinstance(exclude, (set, frozenset)) else exclude, dtype=np.int64)] = True
    return mask


def hamming_scan(query: np.ndarray, items: CodeMatrix, top_m: int, exclude=None) -> RetrievalResult:
    t0 = time.perf_counter()
    d = hamming_distances(query, items)
    mask = _exclude_mask(items.n, exclude)
    n_avail = items.n
    if mask is not None:
        d[mask] = items.bits + 1
        n_avail -= int(mask.sum())
    top_m = _check_top(top_m, n_avail, "top_m")
    idx = _smallest_int(d, top_m, items.bits + 1)
    return RetrievalResult(idx, d[idx], "hamr", time.perf_counter() - t0)


def continuous_scan(query_z: np.ndarray, items: EmbeddingMatrix, top_n: int, exclude=None) -> RetrievalResult:
    t0 = time.perf_counter()
    s = items.values @ np.asarray(query_z, dtype=items.values.dtype)
    mask = _exclude_mask(items.n, exclude)
    n_avail = items.n
    if mask is not None:
        s[mask] = -np.inf
        n_avail -= int(mask.sum())
    top_n = _check_top(top_n, n_avail, "top_n")
    idx = _largest_float(s, top_n)
    return RetrievalResult(idx, s[idx], "ces", time.perf_counter() - t0)


def hierarchical_search(query_code: np.ndarray, query_z: np.ndarray, item_codes: CodeMatrix,
                        item_embs: EmbeddingMatrix, shortlist_m: int | None, top_n: int,
                        exclude=None) -> RetrievalResult:
    """Hamming shortlist of ``shortlist_m`` items (default ``10 * top_n``) re-ranked by inner product."""
    t0 = time.perf_counter()
    if shortlist_m is None:
        shortlist_m = 10 * top_n
    if top_n > shortlist_m:
        raise ValueError(f"top_n={top_n} exceeds shortlist_m={shortlist_m}")
    short = hamming_scan(query_code, item_codes, shortlist_m, exclude).indices
    s = item_embs.values[short] @ np.asarray(query_z, dtype=item_embs.values.dtype)
    # shortlist indices are arbitrary order; sort by (-score, index)
    order = np.lexsort((short, -s))[:min(top_n, short.size)]
    return RetrievalResult(short[order], s[order], "hies", time.perf_counter() - t0)


def search(mode: str, query_code, query_z, item_codes: CodeMatrix, item_embs: EmbeddingMatrix,
           top_n: int, shortlist_m: int | None = None, exclude=None) -> RetrievalResult:
    if mode == "hamr":
        return hamming_scan(query_code, item_codes, top_n, exclude)
    if mode == "ces":
        return continuous_scan(query_z, item_embs, top_n, exclude)
    if mode == "hies":
        return hierarchical_search(query_code, query_z, item_codes, item_embs, shortlist_m, top_n, exclude)
    raise ValueError(f"unknown retrieval mode {mode!r}; expected one of {MODES}")


def recommend_all(codes: CodeMatrix, embs: EmbeddingMatrix, split, mode: str, top_n: int,
                  shortlist_m: int | None = None, users=None) -> dict[int, RetrievalResult]:
    """Rank unseen items for each user; items interacted with in training are excluded."""
    train = split.train
    nu = train.num_users
    item_codes = codes.rows(slice(nu, None))
    item_embs = embs.rows(slice(nu, None))
    users = range(nu) if users is None else users
    out = {}
    for u in users:
        out[u] = search(mode, codes.packed[u], embs.values[u], item_codes, item_embs,
                        top_n, shortlist_m, train.user_items(u))
    return out
