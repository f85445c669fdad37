"""Command line entry point: ``driftbench <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 extractor error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, config_from_dict
from .core import DataError, load_dataset
from .pipeline import EXIT_CONFIG, EXIT_DATA, EXIT_EXTRACTOR, EXIT_OK, PooledPixels, cmd_correlate, \
    cmd_evaluate, cmd_score_controlled, matrix_from_metrics_json
from .projectors import ExtractorError, make_block_average, make_canny, make_gradient

logger = logging.getLogger("driftbench")


def _parse_set(items) -> dict:
    """``a.b=value`` overrides; values are parsed as JSON, falling back to strings."""
    out: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"bad override {item!r}; expected key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _deep_merge(base: dict, over: dict) -> dict:
    merged = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _deep_merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def _load_run_config(args):
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    over = _parse_set(args.set)
    for flag, key in (("output_dir", "output_dir"), ("cache_dir", "cache_dir"),
                      ("seed", "seed"), ("workers", "workers")):
        value = getattr(args, flag)
        if value is not None:
            over[key] = value
    if args.heatmap:
        over["heatmap"] = True
    return config_from_dict(_deep_merge(data, over))


def run_evaluate(args) -> int:
    cfg = _load_run_config(args)
    matrix, manifest = cmd_evaluate(cfg)
    print(f"evaluated {len(matrix.models)} model(s); config_hash={manifest.config_hash}")
    print(f"reports in {cfg.output_dir}")
    return EXIT_OK


def run_correlate(args) -> int:
    _, corr = cmd_correlate(args.metrics, fixture=args.fixture, out_dir=args.out,
                            abs_mode=not args.signed, heatmap=args.heatmap)
    if args.out is None:
        names = corr.metrics
        width = max(len(n) for n in names)
        print(" " * width + " " + " ".join(f"{n:>8}" for n in names))
        for i, a in enumerate(names):
            cells = ["     n/a" if v != v else f"{v:8.3f}" for v in corr.rho[i]]
            print(f"{a:>{width}} " + " ".join(cells))
    else:
        print(f"correlation written to {Path(args.out) / 'correlation.csv'}")
    return EXIT_OK


def run_report(args) -> int:
    from .analysis import correlation_matrix, emit_reports

    matrix = matrix_from_metrics_json(args.metrics)
    corr = correlation_matrix(matrix, abs_mode=True) if len(matrix.models) >= 3 else None
    emit_reports(matrix, corr, args.out, heatmap=args.heatmap,
                 extra_metadata={"source": [str(p) for p in args.metrics]})
    print((Path(args.out) / "leaderboard.md").read_text())
    return EXIT_OK


def run_probe(args) -> int:
    import numpy as np

    from .probe import ProbeDataset, ProbeDecoder, ProbeTrainConfig, best_constant_dice, save_checkpoint, \
        split_by_hash, toy_edge_dataset, train_probe

    if args.data:
        try:
            with np.load(args.data) as z:
                data = ProbeDataset(z["latents"], z["targets"], [str(s) for s in z["ids"]])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load probe data {args.data}: {exc}") from exc
    else:
        data = toy_edge_dataset(args.n, args.side, args.seed, args.blob_prob)
    try:
        cfg = ProbeTrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                               max_epochs=args.max_epochs, patience=args.patience, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    activation = "sigmoid" if args.task == "depth" else "none"
    decoder = ProbeDecoder(data.latents.shape[1], activation)
    out = Path(args.out)
    result = train_probe(data, decoder, cfg, args.task, log_path=out / "training_log.csv")
    save_checkpoint(out / "probe.pt", decoder, cfg, args.task)
    report = {"task": args.task, "best_val_loss": result.best_val_loss, "test_metric": result.test_metric,
              "epochs_run": result.epochs_run, "best_epoch": result.best_epoch}
    if result.test_dice is not None:
        _, _, test = split_by_hash(data.ids)
        report["test_dice"] = result.test_dice
        report["constant_dice"] = best_constant_dice(data.targets[test])
    (out / "probe_result.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def run_simulate(args) -> int:
    from .synthetic import simulate

    report = simulate(args.trials, args.seed, args.sizes)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def run_score_controlled(args) -> int:
    from .metrics import FeatureStats, PixelPCA, feature_stats

    projector = {"canny": make_canny, "gradient": make_gradient, "block_average": make_block_average}[
        args.projector]()
    stats = extractor = None
    if args.reference_stats:
        try:
            stats = FeatureStats.load(args.reference_stats)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load reference stats: {exc}") from exc
        extractor = PooledPixels(args.pool_side)
    elif args.reference_dir:
        refs = load_dataset(args.reference_dir, args.side).images
        extractor = PixelPCA(min(16, len(refs) - 1), args.pool_side).fit(refs)
        stats = feature_stats(refs, extractor)
    score = cmd_score_controlled(args.generated, args.conditions, projector, stats, extractor, args.side)
    report = {"fid": score.fid, "l1": score.l1, "n": score.n, "unmatched": score.unmatched}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="driftbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("evaluate", parents=[common],
                       help="compute metrics for every model in a config")
    e.add_argument("config")
    e.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path, JSON value); repeatable")
    e.add_argument("--output-dir")
    e.add_argument("--cache-dir")
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--heatmap", action="store_true")
    e.set_defaults(func=run_evaluate)

    c = sub.add_parser("correlate", parents=[common],
                       help="Spearman matrix over metrics.json files or a bundled fixture")
    c.add_argument("metrics", nargs="*", help="metrics.json files")
    c.add_argument("--fixture", choices=["table4"])
    c.add_argument("--out")
    c.add_argument("--signed", action="store_true", help="keep signs instead of absolute values")
    c.add_argument("--heatmap", action="store_true")
    c.set_defaults(func=run_correlate)

    r = sub.add_parser("report", parents=[common], help="regenerate tables from metrics.json files")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--heatmap", action="store_true")
    r.set_defaults(func=run_report)

    pr = sub.add_parser("probe", parents=[common], help="train a latent probe decoder")
    pr.add_argument("--data", help="npz with latents (N,C,H,W), targets (N,1,16H,16W), ids")
    pr.add_argument("--task", choices=["edges", "depth"], default="edges")
    pr.add_argument("--n", type=int, default=400, help="toy dataset size")
    pr.add_argument("--side", type=int, default=64)
    pr.add_argument("--blob-prob", type=float, default=0.25)
    pr.add_argument("--lr", type=float, default=1e-4)
    pr.add_argument("--weight-decay", type=float, default=1e-2)
    pr.add_argument("--batch-size", type=int, default=128)
    pr.add_argument("--max-epochs", type=int, default=100)
    pr.add_argument("--patience", type=int, default=10)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", default="probe_out")
    pr.set_defaults(func=run_probe)

    s = sub.add_parser("simulate", parents=[common],
                       help="finite-world checks and the permutation construction")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sizes", type=int, nargs="+", default=[8, 32, 128])
    s.add_argument("--out")
    s.set_defaults(func=run_simulate)

    sc = sub.add_parser("score-controlled", parents=[common],
                        help="FID and condition L1 of controlled generations")
    sc.add_argument("--generated", required=True)
    sc.add_argument("--conditions", required=True, help="directory of <id>.npy or <id>.png maps")
    ref = sc.add_mutually_exclusive_group()
    ref.add_argument("--reference-dir")
    ref.add_argument("--reference-stats", help="npz with mean, cov, n of pooled-pixel features")
    sc.add_argument("--projector", choices=["canny", "gradient", "block_average"], default="canny")
    sc.add_argument("--side", type=int, default=256)
    sc.add_argument("--pool-side", type=int, default=8)
    sc.add_argument("--out")
    sc.set_defaults(func=run_score_controlled)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExtractorError as exc:
        print(f"extractor error: {exc}", file=sys.stderr)
        return EXIT_EXTRACTOR


if __name__ == "__main__":
    sys.exit(main())
