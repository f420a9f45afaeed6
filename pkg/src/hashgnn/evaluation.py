"""Top-n ranking metrics, pairwise AUC and the retrieval timing benchmark."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .retrieval import CodeMatrix, EmbeddingMatrix, search

DEFAULT_CUTOFFS = (10, 50, 100)


def hit_rate(ranked: Sequence[int], ground_truth: Iterable[int], n: int) -> float:
    """Fraction of the ground-truth items found in the top ``n`` (recall-style)."""
    gt = set(ground_truth)
    if not gt:
        raise ValueError("empty ground truth")
    return len(gt.intersection(list(ranked)[:n])) / len(gt)


def ndcg(ranked: Sequence[int], ground_truth: Iterable[int], n: int) -> float:
    """Binary-relevance NDCG@n with a log2 discount and 1-based positions."""
    gt = set(ground_truth)
    if not gt:
        raise ValueError("empty ground truth")
    dcg = sum(1.0 / math.log2(pos + 2) for pos, item in enumerate(list(ranked)[:n]) if item in gt)
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(len(gt), n)))
    return dcg / idcg


def auc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg), exact via mid-ranks."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class MetricReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    mode: str = ""
    auc: float | None = None
    timing: dict[str, float] = field(default_factory=dict)
    per_user: dict[int, dict[str, float]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for n in sorted(self.hr):
            out.append({"mode": self.mode, "cutoff": n, "hr": self.hr[n], "ndcg": self.ndcg[n],
                        "users": self.n_users})
        return out

    def table(self) -> str:
        lines = [f"{'cutoff':>6}  {'HR':>8}  {'NDCG':>8}"]
        for n in sorted(self.hr):
            lines.append(f"{n:>6}  {self.hr[n]:8.4f}  {self.ndcg[n]:8.4f}")
        lines.append(f"users evaluated: {self.n_users}" + (f"  mode: {self.mode}" if self.mode else ""))
        if self.auc is not None:
            lines.append(f"AUC: {self.auc:.4f}")
        return "\n".join(lines)


def evaluate_rankings(ranked: Mapping[int, Sequence[int]], ground_truth: Mapping[int, Iterable[int]],
                      cutoffs: Sequence[int] = DEFAULT_CUTOFFS, mode: str = "",
                      keep_per_user: bool = False) -> MetricReport:
    """Average HR/NDCG over users that have a ranking and a non-empty ground truth."""
    hr_sum = {n: 0.0 for n in cutoffs}
    nd_sum = {n: 0.0 for n in cutoffs}
    per_user = {}
    count = 0
    for u in sorted(ground_truth):
        gt = list(ground_truth[u])
        if not gt or u not in ranked:
            continue
        count += 1
        r = list(ranked[u])
        row = {}
        for n in cutoffs:
            h, d = hit_rate(r, gt, n), ndcg(r, gt, n)
            hr_sum[n] += h
            nd_sum[n] += d
            row[f"hr@{n}"], row[f"ndcg@{n}"] = h, d
        if keep_per_user:
            per_user[u] = row
    denom = max(count, 1)
    return MetricReport({n: hr_sum[n] / denom for n in cutoffs}, {n: nd_sum[n] / denom for n in cutoffs},
                        count, mode, per_user=per_user)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


BENCH_COLUMNS = ("mode", "n_items", "K", "median_seconds", "speedup_vs_ces")


def bench_retrieval(item_codes: CodeMatrix, item_embs: EmbeddingMatrix, query_codes: np.ndarray,
                    query_embs: np.ndarray, modes: Sequence[str] = ("hamr", "hies", "ces"), top_n: int = 100,
                    repeats: int = 5, shortlist_m: int | None = None, threads: int | None = 1) -> list[dict]:
    """Median wall-clock (over ``repeats``) to answer every query in each mode.

    Timing covers distance computation and top-n selection only. Modes are
    interleaved query by query so slow drifts hit all of them alike, and
    their order rotates per query so no mode always runs on the cache
    state another one left behind.
    """
    from threadpoolctl import threadpool_limits

    samples: dict[str, list[float]] = {m: [] for m in modes}
    with threadpool_limits(limits=threads):
        for _ in range(repeats):
            acc = dict.fromkeys(modes, 0.0)
            for q, (qc, qz) in enumerate(zip(query_codes, query_embs)):
                shift = q % len(modes)
                for mode in modes[shift:] + modes[:shift]:
                    t0 = time.perf_counter()
                    search(mode, qc, qz, item_codes, item_embs, top_n, shortlist_m)
                    acc[mode] += time.perf_counter() - t0
            for mode in modes:
                samples[mode].append(acc[mode])
    med = {m: float(np.median(v)) for m, v in samples.items()}
    ces = med.get("ces")
    return [{"mode": m, "n_items": item_codes.n, "K": item_codes.bits, "median_seconds": med[m],
             "speedup_vs_ces": (ces / med[m]) if ces is not None and med[m] > 0 else float("nan"),
             "samples": samples[m]}
            for m in modes]
