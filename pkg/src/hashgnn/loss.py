"""Link-reconstruction cross-entropy and triplet ranking hinge over code inner products.

All losses are sums over the batch. Index arrays refer to rows of the
``codes`` matrix passed alongside them; gradients come back with the same
shape as ``codes``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .graph import PairBatch


@dataclass(frozen=True)
class LossReport:
    total: float
    cross_entropy: float
    ranking: float
    lam: float
    active_triplets: int


def _softplus(x):
    return np.logaddexp(0.0, x)


def _scatter_rows(n_rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values[k]`` into row ``index[k]`` (a sparse matmul; much faster than ``np.add.at``)."""
    s = sp.csr_matrix((np.ones(index.size, dtype=values.dtype), (index, np.arange(index.size))),
                      shape=(n_rows, index.size))
    return np.asarray(s @ values)


def pair_likelihood(code_i, code_j, label: int) -> float:
    code_i, code_j = np.asarray(code_i, dtype=np.float64), np.asarray(code_j, dtype=np.float64)
    if code_i.shape != code_j.shape:
        raise ValueError("codes differ in length")
    s = float(expit(code_i @ code_j))
    return s if label else 1.0 - s


def _triplet_arrays(triplets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(triplets, tuple) and len(triplets) == 3 and isinstance(triplets[0], np.ndarray):
        return tuple(np.asarray(t, dtype=np.int64) for t in triplets)
    arr = np.asarray(list(triplets), dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def cross_entropy_loss(batch: PairBatch, codes: np.ndarray) -> tuple[float, np.ndarray]:
    left, right = batch.left, batch.right
    y = np.asarray(batch.labels, dtype=codes.dtype)
    ci, cj = codes[left], codes[right]
    logits = np.einsum("ij,ij->i", ci, cj)
    # -log sigma(s) = softplus(-s); -log(1 - sigma(s)) = softplus(s)
    loss = float(np.sum(np.where(y > 0, _softplus(-logits), _softplus(logits))))
    g = (expit(logits) - y).astype(codes.dtype)[:, None]
    grad = _scatter_rows(codes.shape[0], np.concatenate([left, right]),
                         np.concatenate([g * cj, g * ci]))
    return loss, grad


def ranking_loss(triplets, codes: np.ndarray, alpha: float = 0.2) -> tuple[float, np.ndarray, int]:
    """Sum of ``max(0, sigma(<a,n>) - sigma(<a,p>) + alpha)``; returns (loss, grad, n_active)."""
    a, p, n = _triplet_arrays(triplets)
    grad = np.zeros_like(codes)
    if a.size == 0:
        return 0.0, grad, 0
    ca, cp, cn = codes[a], codes[p], codes[n]
    sp_ = expit(np.einsum("ij,ij->i", ca, cp))
    sn_ = expit(np.einsum("ij,ij->i", ca, cn))
    margin = sn_ - sp_ + alpha
    active = margin > 0
    loss = float(np.sum(np.where(active, margin, 0.0)))
    d_pos = np.where(active, -sp_ * (1 - sp_), 0.0).astype(codes.dtype)[:, None]
    d_neg = np.where(active, sn_ * (1 - sn_), 0.0).astype(codes.dtype)[:, None]
    grad = _scatter_rows(codes.shape[0], np.concatenate([a, p, n]),
                         np.concatenate([d_pos * cp + d_neg * cn, d_pos * ca, d_neg * ca]))
    return loss, grad, int(active.sum())


def total_loss(batch: PairBatch, triplets, codes: np.ndarray, lam: float = 0.5,
               alpha: float = 0.2) -> tuple[LossReport, np.ndarray]:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    ce, g_ce = cross_entropy_loss(batch, codes)
    rk, g_rk, n_active = ranking_loss(triplets, codes, alpha)
    if lam == 0:
        # ablation: ranking term is not part of the objective at all
        rk, n_active = 0.0, 0
        grad = g_ce
    else:
        grad = g_ce + codes.dtype.type(lam) * g_rk
    return LossReport(ce + lam * rk, ce, rk, lam, n_active), grad
