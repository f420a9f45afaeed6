"""Adam training loop with annealed continuous guidance, plus gradient checking."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np
from scipy.special import expit

from .encoder import GcnParams, gcn_backward, gcn_forward, mean_operator
from .graph import PairBatch, SplitDataset, sample_edge_batch, sample_triplet_arrays
from .hashing import (
    HashLayerParams,
    binarize,
    guided_mix,
    hash_backward,
    hash_forward,
    sample_guidance_mask,
    ste_backward,
)
from .loss import LossReport, total_loss

logger = logging.getLogger(__name__)

MODES = ("hashgnn", "hash_ste", "hashgnn_nr", "continuous")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, model: "TrainedModel | None" = None):
        super().__init__(message)
        self.model = model


@dataclass
class TrainConfig:
    bits: int = 32
    lam: float = 0.5
    alpha: float = 0.2
    lr: float = 0.001
    batch_size: int = 256
    neg_per_pos: int = 1
    triplets_per_node: int = 5
    epochs: int = 30
    iterations: int | None = None  # overrides epochs when set
    p_init: float = 1.0
    p_decay: float = 0.95
    p_interval: int = 250
    p_floor: float = 0.5
    p_decay_kind: str = "multiplicative"
    mode: str = "hashgnn"
    seed: int = 0
    feature_dim: int = 128
    hidden_dims: tuple[int, ...] = (128, 68)
    init_std: float = 0.02
    max_neighbors: int | None = None
    eval_every: int = 0
    train_frac: float = 0.7
    valid_frac: float = 0.1
    min_degree: int = 0
    chronological: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.p_decay_kind not in ("multiplicative", "additive"):
            raise ValueError(f"unknown p_decay_kind {self.p_decay_kind!r}")
        if not 0.0 <= self.p_floor <= self.p_init <= 1.0:
            raise ValueError("need 0 <= p_floor <= p_init <= 1")
        for name in ("bits", "batch_size", "p_interval", "feature_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.alpha < 0 or self.lr <= 0:
            raise ValueError("lambda and alpha must be >= 0, lr > 0")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.mode == "hashgnn_nr" else self.lam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def p_schedule(iteration: int, cfg: TrainConfig) -> float:
    if cfg.mode == "hash_ste":
        return 0.0
    if cfg.mode == "continuous":
        return 1.0
    steps = iteration // cfg.p_interval
    if cfg.p_decay_kind == "multiplicative":
        p = cfg.p_init * cfg.p_decay ** steps
    else:
        p = cfg.p_init - (1.0 - cfg.p_decay) * steps
    return max(cfg.p_floor, p)


# ---------------------------------------------------------------------------
# parameters and optimiser
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    gcn: GcnParams
    hash: HashLayerParams

    @classmethod
    def init(cls, num_nodes: int, cfg: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> "ModelParams":
        dims = (cfg.feature_dim, *cfg.hidden_dims)
        gcn = GcnParams.init(num_nodes, dims, rng, cfg.init_std, dtype)
        hl = HashLayerParams.init(dims[-1], cfg.bits, rng, cfg.init_std, dtype)
        return cls(gcn, hl)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"features": self.gcn.features}
        for l, w in enumerate(self.gcn.weights, start=1):
            out[f"gcn_w{l}"] = w
        out["hash_w"] = self.hash.weight
        out["hash_b"] = self.hash.bias
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ModelParams":
        n_layers = sum(1 for k in t if k.startswith("gcn_w"))
        weights = [t[f"gcn_w{l}"] for l in range(1, n_layers + 1)]
        return cls(GcnParams(t["features"], weights, ("relu",) * n_layers),
                   HashLayerParams(t["hash_w"], t["hash_b"]))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams.from_tensors({k: v.astype(dtype) for k, v in self.tensors().items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors({k: v.copy() for k, v in self.tensors().items()})


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of every tensor in ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {params[name].shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------


@dataclass
class StepBatch:
    """Sampled pairs and triplets re-indexed onto the rows of ``nodes``."""

    nodes: np.ndarray
    pairs: PairBatch
    triplets: tuple[np.ndarray, np.ndarray, np.ndarray]

    @classmethod
    def build(cls, batch: PairBatch, triplets) -> "StepBatch":
        a, p, n = triplets
        allnodes = np.concatenate([batch.left, batch.right, a, p, n])
        nodes, inv = np.unique(allnodes, return_inverse=True)
        sizes = np.cumsum([batch.left.size, batch.right.size, a.size, p.size])
        l, r, ta, tp, tn = np.split(inv, sizes)
        return cls(nodes, PairBatch(l, r, batch.labels), (ta, tp, tn))


def sample_step(split: SplitDataset, cfg: TrainConfig, rng: np.random.Generator) -> StepBatch:
    batch = sample_edge_batch(split, cfg.batch_size, cfg.neg_per_pos, rng)
    pos = batch.labels == 1
    anchors = np.unique(np.concatenate([batch.left[pos], batch.right[pos]]))
    trip = sample_triplet_arrays(split, anchors, cfg.triplets_per_node, rng)
    return StepBatch.build(batch, trip)


@dataclass
class StepResult:
    report: LossReport
    grads: dict[str, np.ndarray]
    z: np.ndarray
    mask: np.ndarray
    preact: list[np.ndarray]
    margins: np.ndarray


def forward_backward(params: ModelParams, mean_op, step: StepBatch, mask: np.ndarray | None,
                     lam: float, alpha: float, p: float = 0.0, rng: np.random.Generator | None = None,
                     offset: np.ndarray | None = None) -> StepResult:
    """Loss and STE gradients for one batch.

    ``mask`` fixes the guidance mask; when None it is drawn with
    probability ``p`` from ``rng``. ``offset`` replaces ``sign(z) - z`` by a
    constant, turning the straight-through surrogate into a smooth function
    of the parameters (used by the finite-difference harness).
    """
    u, trace = gcn_forward(params.gcn, mean_op, step.nodes)
    z = hash_forward(params.hash, u)
    if mask is None:
        mask = sample_guidance_mask(p, z.shape, rng)
    if offset is None:
        mixed = guided_mix(z, binarize(z), mask)
    else:
        mixed = z + np.where(mask, 0, offset).astype(z.dtype)
    report, g_mixed = total_loss(step.pairs, step.triplets, mixed, lam, alpha)
    g_z = ste_backward(g_mixed)
    g_w, g_b, g_u = hash_backward(params.hash, u, z, g_z)
    gg = gcn_backward(params.gcn, trace, g_u)
    grads = {"features": gg.features}
    for l, w in enumerate(gg.weights, start=1):
        grads[f"gcn_w{l}"] = w
    grads["hash_w"] = g_w
    grads["hash_b"] = g_b

    a, pp, n = step.triplets
    margins = np.zeros(0)
    if a.size:
        margins = (expit(np.einsum("ij,ij->i", mixed[a], mixed[n]))
                   - expit(np.einsum("ij,ij->i", mixed[a], mixed[pp])) + alpha)
    return StepResult(report, grads, z, mask, trace.preact, margins)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


LOG_COLUMNS = ("iteration", "total", "ce", "rank", "p", "auc", "seconds")


@dataclass
class TrainedModel:
    params: ModelParams
    config: TrainConfig
    iteration: int = 0
    log: list[dict] = field(default_factory=list)


def total_iterations(split: SplitDataset, cfg: TrainConfig) -> int:
    if cfg.iterations is not None:
        return cfg.iterations
    return cfg.epochs * max(1, math.ceil(split.train.num_edges / cfg.batch_size))


def validation_negatives(split: SplitDataset, seed: int) -> np.ndarray:
    """One fixed non-edge per validation edge, corrupting the item side (local indices)."""
    from .graph import _sample_non_neighbors

    rng = np.random.default_rng([seed, 7919])
    users = split.valid_edges[:, 0]
    items = _sample_non_neighbors(split.full, users, rng) - split.full.num_users
    return np.stack([users, items], axis=1)


def validation_auc(params: ModelParams, mean_op, split: SplitDataset, negatives: np.ndarray) -> float:
    """AUC of pure-code inner products: validation edges vs sampled non-edges."""
    from .evaluation import auc
    from .encoder import encode_nodes

    if len(split.valid_edges) == 0 or len(negatives) == 0:
        return float("nan")
    h = binarize(hash_forward(params.hash, encode_nodes(params.gcn, mean_op)))
    nu = split.full.num_users
    pos = np.einsum("ij,ij->i", h[split.valid_edges[:, 0]], h[split.valid_edges[:, 1] + nu])
    neg = np.einsum("ij,ij->i", h[negatives[:, 0]], h[negatives[:, 1] + nu])
    return auc(pos, neg)


def train(split: SplitDataset, cfg: TrainConfig,
          callback: Callable[[int, ModelParams, LossReport], None] | None = None) -> TrainedModel:
    """Run the full optimisation; deterministic for a fixed config and seed."""
    if split.train.num_edges == 0:
        raise ValueError("train graph is empty")
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(split.train.num_nodes, cfg, rng)
    mean_op = mean_operator(split.train, np.float32, cfg.max_neighbors, np.random.default_rng([cfg.seed, 1]))
    state = AdamState()
    lam = cfg.effective_lambda
    n_iter = total_iterations(split, cfg)
    negatives = validation_negatives(split, cfg.seed)
    model = TrainedModel(params, cfg)
    start = time.perf_counter()

    for it in range(n_iter):
        p = p_schedule(it, cfg)
        step = sample_step(split, cfg, rng)
        try:
            res = forward_backward(params, mean_op, step, None, lam, cfg.alpha, p, rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{exc} at iteration {it}", TrainedModel(params, cfg, it, model.log)) from None
        # params are untouched by a failing step, so they are the last good state
        if not math.isfinite(res.report.total):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}",
                                   TrainedModel(params, cfg, it, model.log))
        try:
            adam_step(params.tensors(), res.grads, state, cfg.lr)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), TrainedModel(params, cfg, it, model.log)) from None
        last = it == n_iter - 1
        do_eval = last or (cfg.eval_every and (it + 1) % cfg.eval_every == 0)
        val = validation_auc(params, mean_op, split, negatives) if do_eval else float("nan")
        r = res.report
        model.log.append({"iteration": it, "total": r.total, "ce": r.cross_entropy, "rank": r.ranking,
                          "p": p, "auc": val, "seconds": time.perf_counter() - start})
        if do_eval and not last:
            logger.info("iter %d loss %.4f p %.3f val auc %.4f", it, r.total, p, val)
        if callback is not None:
            callback(it, params, r)
    model.iteration = n_iter
    return model


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _activity(res: StepResult) -> tuple:
    return tuple(a > 0 for a in res.preact) + (res.margins > 0,)


def finite_diff_check(params: ModelParams, split: SplitDataset, n_points: int = 50, eps: float = 1e-5,
                      cfg: TrainConfig | None = None, seed: int = 0, p: float = 0.5,
                      return_errors: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Works in float64 on one fixed batch with a fixed guidance mask. The
    binarisation offset ``sign(z) - z`` is frozen at the base point, so the
    objective being differenced is exactly the straight-through surrogate
    whose gradient the training step computes. A coordinate whose +-eps
    probes flip any ReLU or hinge on/off is a kink crossing, not a gradient
    error; it is discarded and another coordinate drawn.
    """
    cfg = cfg or TrainConfig()
    params = params.astype(np.float64)
    mean_op = mean_operator(split.train, np.float64)
    rng = np.random.default_rng(seed)
    lam = cfg.effective_lambda

    step = sample_step(split, cfg, rng)
    mask = sample_guidance_mask(p, (step.nodes.size, params.hash.bits), rng)
    base = forward_backward(params, mean_op, step, mask, lam, cfg.alpha)
    offset = binarize(base.z) - base.z
    res = forward_backward(params, mean_op, step, mask, lam, cfg.alpha, offset=offset)
    pattern = _activity(res)
    tensors = params.tensors()

    def probe() -> tuple[float, bool]:
        r = forward_backward(params, mean_op, step, mask, lam, cfg.alpha, offset=offset)
        same = all(np.array_equal(a, b) for a, b in zip(_activity(r), pattern))
        return r.report.total, same

    # feature rows outside the receptive field have zero gradient on both sides; sample touched rows
    touched = np.flatnonzero(np.any(res.grads["features"] != 0, axis=1))
    names = list(tensors)
    errs = []
    attempts = 0
    while len(errs) < n_points:
        attempts += 1
        if attempts > 20 * n_points:
            raise RuntimeError("too many coordinates sit on a non-differentiable point")
        name = names[rng.integers(len(names))]
        t = tensors[name]
        if name == "features" and touched.size:
            idx = (int(rng.choice(touched)), int(rng.integers(t.shape[1])))
        else:
            idx = tuple(int(rng.integers(s)) for s in t.shape)
        orig = t[idx]
        t[idx] = orig + eps
        f_plus, ok_plus = probe()
        t[idx] = orig - eps
        f_minus, ok_minus = probe()
        t[idx] = orig
        if ok_plus and ok_minus:
            errs.append(relative_error(float(res.grads[name][idx]), (f_plus - f_minus) / (2 * eps)))
    errs = np.asarray(errs)
    if return_errors:
        return errs
    return float(errs.max())


def finite_diff_sweep(params: ModelParams, split: SplitDataset, eps_values=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6),
                      **kwargs) -> dict[float, float]:
    """Max relative error per step size, showing truncation vs round-off."""
    return {eps: finite_diff_check(params, split, eps=eps, **kwargs) for eps in eps_values}


def random_params(num_nodes: int, dims=(16, 8, 8), bits: int = 4, std: float = 0.5,
                  seed: int = 0) -> ModelParams:
    """Float64 parameters at a random point, for gradient checks."""
    cfg = replace(TrainConfig(), feature_dim=dims[0], hidden_dims=tuple(dims[1:]), bits=bits, init_std=std)
    rng = np.random.default_rng(seed)
    params = ModelParams.init(num_nodes, cfg, rng, np.float64)
    params.hash.bias[:] = rng.standard_normal(bits) * std
    return params
