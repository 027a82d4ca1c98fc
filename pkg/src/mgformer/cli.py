"""Command line: prepare, train, eval, ablate, bench-oracle.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from .attention import ZeroDenominatorError
from .bench import bench_oracle
from .config import ConfigError, RunConfig
from .evaluation import evaluate
from .graph import GraphFormatError, bucket_items, load_interactions, split_edges
from .spectral import truncated_svd
from .synthetic import block_of_ids, block_recall, make_block_graph, write_block_tsv
from .training import MGFormerModel, TrainingDiverged, train

_log = logging.getLogger("mgformer")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

ABLATIONS = {
    "default": {},
    "w/o structural encodings": {"structural_encodings": False},
    "w/o degree centrality": {"mask_mode": "all_ones"},
    "adjacency mask": {"mask_mode": "adjacency"},
    "elu1 feature map": {"feature_map": "elu1"},
    "focused feature map": {"feature_map": "focused"},
}

# CLI flag -> config key
_OVERRIDES = {
    "dataset": str, "cache_dir": str, "out_dir": str, "d": int, "lam": float, "lr": float,
    "batch_size": int, "epochs": int, "patience": int, "split_seed": int, "init_seed": int,
    "simrf_seed": int, "svd_seed": int, "mask_mode": str, "feature_map": str,
    "focus_power": float, "degree_source": str, "k": int, "threads": int, "synthetic": str,
}


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="set split, init, SimRF and SVD seeds at once")
    for key, typ in _OVERRIDES.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    p.add_argument("--split-ratios", type=float, nargs=3, default=None)
    p.add_argument("--json", action="store_true", help="print reports as JSON")


def _load_config(args, base=None) -> RunConfig:
    data = base.to_dict() if base is not None else {}
    if args.config:
        try:
            data.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    if args.seed is not None:
        for key in ("split_seed", "init_seed", "simrf_seed", "svd_seed"):
            data[key] = args.seed
    for key in _OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.split_ratios is not None:
        data["split_ratios"] = args.split_ratios
    return RunConfig.from_dict(data)


def _emit(args, payload: dict, text: str | None = None):
    if args.json or text is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


# -- commands -----------------------------------------------------------------


def prepare(cfg: RunConfig) -> tuple[dict, bool]:
    """Load, split, decompose and cache. Returns (cache metadata, cache hit)."""
    if ckpt.cache_is_current(cfg):
        return ckpt.read_cache_meta(cfg), True
    if cfg.synthetic == "blocks":
        path = Path(cfg.cache_dir) / "synthetic_blocks.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_block_tsv(path, make_block_graph(seed=cfg.split_seed))
    elif cfg.dataset:
        path = Path(cfg.dataset)
    else:
        raise ConfigError("prepare needs --dataset or --synthetic blocks")
    graph = split_edges(load_interactions(path), cfg.split_ratios, cfg.split_seed)
    train_matrix = graph.matrix(0)
    if cfg.d > min(train_matrix.shape):
        raise ConfigError(f"d={cfg.d} exceeds min(M, N)={min(train_matrix.shape)}")
    enc = truncated_svd(train_matrix, cfg.d, cfg.svd_seed, cfg.oversample, cfg.power_iters)
    return ckpt.write_cache(cfg, graph, enc), False


def _report(model: MGFormerModel, graph, cfg: RunConfig) -> dict:
    H = model.transform()
    M = graph.num_users
    buckets = bucket_items(graph, cfg.popularity_quantiles)
    report = evaluate(H[:M], H[M:], graph, buckets, k=cfg.k).to_dict()
    if cfg.synthetic == "blocks":
        ub = block_of_ids(graph.user_ids, 2, graph.num_users)
        ib = block_of_ids(graph.item_ids, 2, graph.num_items)
        report["block_recall@10"] = block_recall(H[:M], H[M:], graph, ub, ib, 10)
    return report


def _write_jsonl(path, records):
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    ckpt.atomic_write(path, lines.encode("utf-8"))


def run_training(cfg: RunConfig, out_dir: Path | None = None) -> dict:
    graph, enc, _ = ckpt.load_cache(cfg)
    out_dir = Path(out_dir or cfg.out_dir)
    try:
        result = train(graph, enc, cfg)
    except TrainingDiverged as exc:
        if exc.params is not None:
            model = MGFormerModel.build(graph, enc, cfg)
            ckpt.save_checkpoint(out_dir / "model.mgc", ckpt.round_params(exc.params), model.fmap,
                                 cfg, graph.num_users)
        raise
    model = result.model
    model.params = ckpt.round_params(model.params)
    report = _report(model, graph, cfg)
    report["best_epoch"] = result.best_epoch
    ckpt.save_checkpoint(out_dir / "model.mgc", model.params, model.fmap, cfg, graph.num_users)
    _write_jsonl(out_dir / "train_log.jsonl", result.log)
    _write_jsonl(out_dir / "timing.jsonl", result.timings)
    ckpt.atomic_write(out_dir / "report.json", (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return report


def _format_report(report: dict) -> str:
    k = report["k"]
    lines = [f"{'subset':<10} {'users':>7} {'recall@' + str(k):>10} {'ndcg@' + str(k):>10}",
             f"{'overall':<10} {report['num_users_evaluated']:>7d} {report['recall']:>10.4f} {report['ndcg']:>10.4f}"]
    for name, v in report["per_bucket"].items():
        lines.append(f"{name:<10} {v['users']:>7d} {v['recall']:>10.4f} {v['ndcg']:>10.4f}")
    if "block_recall@10" in report:
        lines.append(f"block recall@10: {report['block_recall@10']:.4f}")
    return "\n".join(lines)


def cmd_prepare(args):
    cfg = _load_config(args)
    meta, hit = prepare(cfg)
    payload = {"cache_hit": hit, **meta}
    _emit(args, payload, f"{'cache hit' if hit else 'prepared'}: {meta['num_users']} users, "
          f"{meta['num_items']} items, {meta['num_edges']} edges, splits {meta['split_sizes']}")


def cmd_train(args):
    cfg = _load_config(args)
    with threadpool_limits(cfg.threads):
        report = run_training(cfg)
    _emit(args, report, _format_report(report))


def cmd_eval(args):
    params, fmap, stored, _ = ckpt.load_checkpoint(args.checkpoint)
    cfg = _load_config(args, base=stored)
    with threadpool_limits(cfg.threads):
        graph, enc, _ = ckpt.load_cache(cfg)
        model = MGFormerModel.build(graph, enc, cfg)
        model.params, model.fmap = params, fmap
        report = _report(model, graph, cfg)
    _emit(args, report, _format_report(report))


def cmd_ablate(args):
    cfg = _load_config(args)
    rows = []
    with threadpool_limits(cfg.threads):
        graph, enc, _ = ckpt.load_cache(cfg)
        for name, change in ABLATIONS.items():
            vcfg = cfg.replace(**change)
            result = train(graph, enc, vcfg)
            report = _report(result.model, graph, vcfg)
            row = {"variant": name, "recall": report["recall"], "ndcg": report["ndcg"]}
            if "block_recall@10" in report:
                row["block_recall@10"] = report["block_recall@10"]
            rows.append(row)
    header = f"{'variant':<26} {'recall@' + str(cfg.k):>10} {'ndcg@' + str(cfg.k):>10}"
    if rows and "block_recall@10" in rows[0]:
        header += f" {'block@10':>10}"
    lines = [header]
    for r in rows:
        extra = f" {r['block_recall@10']:>10.4f}" if "block_recall@10" in r else ""
        lines.append(f"{r['variant']:<26} {r['recall']:>10.4f} {r['ndcg']:>10.4f}{extra}")
    _emit(args, {"k": cfg.k, "rows": rows}, "\n".join(lines))


def cmd_bench_oracle(args):
    slope_sizes = () if args.no_slope else tuple(2**p for p in range(10, 16))
    dense_sizes = () if args.no_slope else tuple(2**p for p in range(8, 13))
    report = bench_oracle(tuple(args.sizes), args.m, args.seed, slope_sizes, dense_sizes,
                          corrupt_mask=args.corrupt_mask, repeats=args.repeats)
    report["passed"] = report["max_rel_error"] <= args.tolerance
    lines = [f"{'n':>6} {'max rel err':>12} {'linear s':>10} {'dense s':>10}"]
    for r in report["equivalence"]:
        lines.append(f"{r['n']:>6d} {r['max_rel_error']:>12.3e} {r['linear_seconds']:>10.5f} {r['dense_seconds']:>10.5f}")
    for key in ("linear_timing", "dense_timing"):
        if key in report:
            lines.append(f"{key.replace('_', ' ')} log-log slope: {report[key]['slope']:.3f}")
    lines.append("PASS" if report["passed"] else "FAIL")
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print("\n".join(lines))
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load, split, SVD-encode and cache a dataset")
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared cache and write a checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-oracle", help="linear path vs dense oracle: error and timing")
    p.add_argument("--sizes", type=int, nargs="+", default=[256, 512, 1024])
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--no-slope", action="store_true", help="skip the timing slope sweep")
    p.add_argument("--corrupt-mask", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (GraphFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, ZeroDenominatorError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
