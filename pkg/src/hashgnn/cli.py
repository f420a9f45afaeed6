"""Command-line entry point: ``hashgnn {train,encode,retrieve,eval,bench}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .evaluation import BENCH_COLUMNS, bench_retrieval, evaluate_rankings
from .formats import (
    FormatError,
    read_checkpoint,
    read_codes,
    read_embeddings,
    read_ranked,
    write_checkpoint,
    write_codes,
    write_embeddings,
    write_id_map,
    write_ranked,
    write_rows,
)
from .graph import GraphError, load_edge_list, split_interactions
from .retrieval import CodeMatrix, EmbeddingMatrix, encode_all, recommend_all
from .trainer import LOG_COLUMNS, MODES, TrainConfig, TrainingDiverged, train

logger = logging.getLogger("hashgnn")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
THREADS_ENV = "HASHGNN_THREADS"


class UsageError(Exception):
    pass


def _stem(path: str) -> str:
    p = Path(path)
    return str(p.with_suffix("")) if p.suffix else str(p)


def _load_split(cfg: TrainConfig, edges: str):
    graph = load_edge_list(edges, cfg.min_degree)
    return split_interactions(graph, cfg.train_frac, cfg.valid_frac, cfg.seed, cfg.chronological)


def cmd_train(args) -> int:
    cfg = TrainConfig(
        bits=args.bits, lam=args.lam, alpha=args.alpha, lr=args.lr, batch_size=args.batch,
        epochs=args.epochs, iterations=args.iterations, triplets_per_node=args.triplets,
        p_init=args.p_init, p_decay=args.p_decay, p_interval=args.p_interval, p_floor=args.p_floor,
        p_decay_kind=args.p_decay_kind, mode=args.mode, seed=args.seed, min_degree=args.min_degree,
        train_frac=args.train_frac, valid_frac=args.valid_frac, eval_every=args.eval_every,
        chronological=args.chronological, neg_per_pos=args.neg_per_pos,
    )
    split = _load_split(cfg, args.edges)
    logger.info("graph: %d users, %d items, %d train edges", split.train.num_users, split.train.num_items,
                split.train.num_edges)
    log_path = args.log or _stem(args.out) + ".log.csv"
    try:
        model = train(split, cfg)
    except TrainingDiverged as exc:
        if exc.model is not None:
            write_checkpoint(args.out, exc.model)
            write_rows(log_path, exc.model.log, LOG_COLUMNS)
        logger.error("%s", exc)
        return EXIT_NUMERIC
    write_checkpoint(args.out, model)
    write_rows(log_path, model.log, LOG_COLUMNS)
    write_id_map(_stem(args.out) + ".users.tsv", split.full.user_ids)
    write_id_map(_stem(args.out) + ".items.tsv", split.full.item_ids)
    last = model.log[-1]
    logger.info("done: %d iterations, final loss %.4f, val auc %.4f", model.iteration, last["total"], last["auc"])
    return 0


def cmd_encode(args) -> int:
    model = read_checkpoint(args.checkpoint)
    split = _load_split(model.config, args.edges)
    codes, embs = encode_all(model, split.train)
    write_codes(args.out + ".hgnc", codes)
    write_embeddings(args.out + ".hgne", embs)
    logger.info("wrote %d codes of %d bits to %s.hgnc/.hgne", codes.n, codes.bits, args.out)
    return 0


def cmd_retrieve(args) -> int:
    codes, embs = read_codes(args.codes), read_embeddings(args.embeddings)
    model = read_checkpoint(args.checkpoint)
    split = _load_split(model.config, args.edges)
    if not (codes.n == embs.n == split.train.num_nodes) or codes.bits != embs.k:
        raise FormatError(f"inconsistent inputs: codes {codes.n}x{codes.bits}, embeddings {embs.n}x{embs.k}, "
                          f"graph {split.train.num_nodes} nodes")
    results = recommend_all(codes, embs, split, args.mode, args.topn, args.shortlist)
    write_ranked(args.out, results, split.full.user_ids, split.full.item_ids)
    logger.info("wrote rankings for %d users to %s", len(results), args.out)
    return 0


def cmd_eval(args) -> int:
    model = read_checkpoint(args.checkpoint)
    split = _load_split(model.config, args.edges)
    edges = split.valid_edges if args.on == "valid" else split.test_edges
    users, items = split.full.user_ids, split.full.item_ids
    truth: dict[str, list[str]] = {}
    for u, i in edges.tolist():
        truth.setdefault(users[u], []).append(items[i])
    ranked = read_ranked(args.ranked)
    report = evaluate_rankings(ranked, truth, args.cutoffs, mode=args.label)
    write_rows(args.out, report.rows(), ("mode", "cutoff", "hr", "ndcg", "users"))
    print(report.table())
    return 0


def cmd_bench(args) -> int:
    if args.synthetic:
        rng = np.random.default_rng(args.seed)
        n = args.synthetic + args.queries
        z = np.tanh(rng.standard_normal((n, args.bits))).astype(np.float32)
        codes, embs = CodeMatrix.from_embeddings(z), EmbeddingMatrix(z)
        q, items = np.arange(args.queries), slice(args.queries, None)
    else:
        if not (args.codes and args.embeddings):
            raise UsageError("bench needs --codes and --embeddings, or --synthetic N")
        codes, embs = read_codes(args.codes), read_embeddings(args.embeddings)
        if codes.n != embs.n:
            raise FormatError("code and embedding files disagree on row count")
        if args.num_users is not None:
            q, items = np.arange(min(args.queries, args.num_users)), slice(args.num_users, None)
        else:
            q, items = np.arange(min(args.queries, codes.n)), slice(None)
    rows = bench_retrieval(codes.rows(items), embs.rows(items), codes.packed[q], embs.values[q],
                           args.modes, args.topn, args.repeats, args.shortlist, args.threads)
    write_rows(args.out, rows, BENCH_COLUMNS)
    for r in rows:
        print(f"{r['mode']:>5}  {r['median_seconds']:.6f}s  x{r['speedup_vs_ces']:.2f}")
    return 0


def _cutoffs(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad cutoff list {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return vals


def _modes(text: str) -> tuple[str, ...]:
    vals = tuple(x.strip() for x in text.split(",") if x.strip())
    for v in vals:
        if v not in ("hamr", "hies", "ces"):
            raise argparse.ArgumentTypeError(f"unknown mode {v!r}")
    return vals


def read_config_overlay(path: str) -> dict[str, str]:
    """``key=value`` lines (``#`` comments allowed); keys use flag spelling without dashes."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hashgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker cap for numeric kernels (default: ${THREADS_ENV} or unlimited)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    d = TrainConfig()
    t = sub.add_parser("train", help="train a model and write a checkpoint + training log")
    t.add_argument("--config", help="key=value overlay file; explicit flags win")
    t.add_argument("--edges", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default: <out stem>.log.csv)")
    t.add_argument("--bits", type=int, default=d.bits)
    t.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    t.add_argument("--alpha", type=float, default=d.alpha)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--batch", type=int, default=d.batch_size)
    t.add_argument("--neg-per-pos", type=int, default=d.neg_per_pos)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--iterations", type=int, default=None, help="overrides --epochs")
    t.add_argument("--triplets", type=int, default=d.triplets_per_node)
    t.add_argument("--p-init", type=float, default=d.p_init)
    t.add_argument("--p-decay", type=float, default=d.p_decay)
    t.add_argument("--p-interval", type=int, default=d.p_interval)
    t.add_argument("--p-floor", type=float, default=d.p_floor)
    t.add_argument("--p-decay-kind", choices=("multiplicative", "additive"), default=d.p_decay_kind)
    t.add_argument("--mode", choices=MODES, default=d.mode)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--min-degree", type=int, default=d.min_degree)
    t.add_argument("--train-frac", type=float, default=d.train_frac)
    t.add_argument("--valid-frac", type=float, default=d.valid_frac)
    t.add_argument("--eval-every", type=int, default=d.eval_every)
    t.add_argument("--chronological", action="store_true", help="split by timestamp instead of at random")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="write hash codes (.hgnc) and embeddings (.hgne) for every node")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--edges", required=True)
    e.add_argument("--out", required=True, help="output prefix")
    e.set_defaults(func=cmd_encode)

    r = sub.add_parser("retrieve", help="rank unseen items for every user")
    r.add_argument("--codes", required=True)
    r.add_argument("--embeddings", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--edges", required=True)
    r.add_argument("--mode", choices=("hamr", "hies", "ces"), default="hies")
    r.add_argument("--topn", type=int, default=100)
    r.add_argument("--shortlist", type=int, default=None, help="hies candidate count (default 10 x topn)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_retrieve)

    v = sub.add_parser("eval", help="HR/NDCG of ranked lists against held-out interactions")
    v.add_argument("--ranked", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--edges", required=True)
    v.add_argument("--cutoffs", type=_cutoffs, default=(10, 50, 100))
    v.add_argument("--on", choices=("test", "valid"), default="test")
    v.add_argument("--label", default="", help="mode tag written into the report")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time hamr/hies/ces scans")
    b.add_argument("--codes")
    b.add_argument("--embeddings")
    b.add_argument("--num-users", type=int, default=None,
                   help="rows before this index are queries, the rest the item pool")
    b.add_argument("--synthetic", type=int, default=0, help="benchmark N random items instead of files")
    b.add_argument("--bits", type=int, default=32)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--queries", type=int, default=100)
    b.add_argument("--topn", type=int, default=100)
    b.add_argument("--shortlist", type=int, default=None)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--modes", type=_modes, default=("hamr", "hies", "ces"))
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return parser


def _apply_overlay(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overlay = read_config_overlay(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in overlay.items():
            key = {"lambda": "lam", "batch_size": "batch"}.get(k, k)
            if key not in actions:
                raise UsageError(f"unknown config key {k!r}")
            a = actions[key]
            defaults[key] = a.type(v) if a.type else v
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_overlay(parser, argv)
    except UsageError as exc:
        print(f"hashgnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"hashgnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "train":
        logging.getLogger("hashgnn").setLevel(logging.INFO)
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    args.threads = threads
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"hashgnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GraphError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"hashgnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"hashgnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"hashgnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
