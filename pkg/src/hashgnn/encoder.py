"""Mean-aggregating graph convolution with a hand-written reverse pass.

Each layer computes ``act(MEAN(self + neighbors) @ W)``; row ``i`` of the
mean operator ``M = (deg + 1)^-1 (A + I)`` averages a node with its
neighbors. A forward call only touches the receptive field of the requested
nodes, so feature rows outside it get exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import InteractionGraph

ACTIVATIONS = ("relu", "identity", "tanh")


class ConfigurationError(ValueError):
    pass


def mean_operator(graph: InteractionGraph, dtype=np.float32, max_neighbors: int | None = None,
                  rng: np.random.Generator | None = None) -> sp.csr_matrix:
    """Row-normalised ``A + I`` as CSR.

    ``max_neighbors`` keeps a uniform sample of at most that many neighbors
    per node (self is always kept).
    """
    adj = graph.global_adjacency().tocsr()
    if max_neighbors is not None:
        rng = rng or np.random.default_rng(0)
        rows, cols = [], []
        for v in range(adj.shape[0]):
            nb = adj.indices[adj.indptr[v]:adj.indptr[v + 1]]
            if nb.size > max_neighbors:
                nb = np.sort(rng.choice(nb, size=max_neighbors, replace=False))
            rows.append(np.full(nb.size, v))
            cols.append(nb)
        r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        adj = sp.csr_matrix((np.ones(r.size), (r, c)), shape=adj.shape)
    a = adj + sp.identity(adj.shape[0], format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    m = sp.diags(1.0 / deg) @ a
    m = m.tocsr().astype(dtype)
    m.sort_indices()
    return m


@dataclass
class GcnParams:
    features: np.ndarray
    weights: list[np.ndarray]
    activations: tuple[str, ...] = ("relu", "relu")

    def __post_init__(self):
        if len(self.activations) != len(self.weights):
            raise ConfigurationError("one activation per layer required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        dim = self.features.shape[1]
        for l, w in enumerate(self.weights):
            if w.shape[0] != dim:
                raise ConfigurationError(f"layer {l + 1}: expected {dim} input rows, got {w.shape[0]}")
            dim = w.shape[1]

    @classmethod
    def init(cls, num_nodes: int, dims=(128, 128, 68), rng: np.random.Generator | None = None,
             std: float = 0.02, dtype=np.float32, activations: tuple[str, ...] | None = None) -> "GcnParams":
        """Normal(0, std^2) initialisation; ``dims`` is (feature dim, hidden..., output)."""
        rng = rng or np.random.default_rng(0)
        feats = (rng.standard_normal((num_nodes, dims[0])) * std).astype(dtype)
        weights = [(rng.standard_normal((a, b)) * std).astype(dtype) for a, b in zip(dims[:-1], dims[1:])]
        acts = activations or ("relu",) * len(weights)
        return cls(feats, weights, tuple(acts))

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


@dataclass
class GcnGrads:
    features: np.ndarray
    weights: list[np.ndarray]


@dataclass
class ForwardTrace:
    rows: list[np.ndarray]            # rows[l] = node ids whose layer-l output was computed
    mean_blocks: list[sp.csr_matrix]  # mean_blocks[l] maps rows[l] -> rows[l + 1]
    pooled: list[np.ndarray] = field(default_factory=list)
    preact: list[np.ndarray] = field(default_factory=list)
    shapes: tuple = ()


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name: str, pre: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (pre > 0)
    if name == "tanh":
        t = np.tanh(pre)
        return g * (1 - t * t)
    return g


def _restrict(m: sp.csr_matrix, rows: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Rows of ``m`` with columns compacted to the ones actually referenced."""
    sub = m[rows]
    cols = np.unique(sub.indices)
    local = np.searchsorted(cols, sub.indices)
    block = sp.csr_matrix((sub.data, local, sub.indptr), shape=(len(rows), cols.size))
    return block, cols


def gcn_forward(params: GcnParams, graph, nodes) -> tuple[np.ndarray, ForwardTrace]:
    """Encode ``nodes``; ``graph`` is an InteractionGraph or a precomputed mean operator."""
    m = graph if sp.issparse(graph) else mean_operator(graph, params.features.dtype)
    if m.shape[0] != params.features.shape[0]:
        raise ConfigurationError(
            f"graph has {m.shape[0]} nodes but feature table has {params.features.shape[0]} rows")
    if m.dtype != params.features.dtype:
        m = m.astype(params.features.dtype)
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= m.shape[0]):
        raise IndexError("node index out of range")

    n_layers = len(params.weights)
    rows = [None] * (n_layers + 1)
    blocks = [None] * n_layers
    rows[n_layers] = nodes
    for l in range(n_layers - 1, -1, -1):
        blocks[l], rows[l] = _restrict(m, rows[l + 1])

    trace = ForwardTrace(rows, blocks, shapes=tuple(w.shape for w in params.weights)
                         + (params.features.shape,))
    h = params.features[rows[0]]
    for l, (w, act) in enumerate(zip(params.weights, params.activations)):
        pooled = blocks[l] @ h
        pre = pooled @ w
        trace.pooled.append(pooled)
        trace.preact.append(pre)
        h = _act(act, pre)
    return h, trace


def gcn_backward(params: GcnParams, trace: ForwardTrace, grad_out: np.ndarray) -> GcnGrads:
    shapes = tuple(w.shape for w in params.weights) + (params.features.shape,)
    if shapes != trace.shapes or grad_out.shape != trace.preact[-1].shape:
        raise ValueError("trace does not match parameters or output gradient")
    w_grads: list[np.ndarray] = [None] * len(params.weights)
    g = grad_out
    for l in range(len(params.weights) - 1, -1, -1):
        g = _act_grad(params.activations[l], trace.preact[l], g)
        w_grads[l] = trace.pooled[l].T @ g
        g = trace.mean_blocks[l].T @ (g @ params.weights[l].T)
    feats = np.zeros_like(params.features)
    feats[trace.rows[0]] = g
    return GcnGrads(feats, w_grads)


def encode_nodes(params: GcnParams, graph) -> np.ndarray:
    """Full-graph forward; equivalent to ``gcn_forward`` on every node."""
    m = graph if sp.issparse(graph) else mean_operator(graph, params.features.dtype)
    h = params.features
    for w, act in zip(params.weights, params.activations):
        h = _act(act, (m @ h) @ w)
    return h
