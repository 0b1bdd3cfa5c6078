"""Command-line entry point.

Machine-readable output (CSV or JSON) goes to stdout, or to files under
``--out-dir``; logging goes to stderr. Exit status is 0 on success, 1 when a
check fails and 2 on bad input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any

import numpy as np

from htrpn.checks import run_losscheck
from htrpn.config import ConfigError, RunConfig, load_config, with_overrides
from htrpn.ingest import POOL_CSV_FIELDS, load_coco, load_split, pool_stats
from htrpn.matcher import match_anchors
from htrpn.pyramid import feature_shape, generate_anchors
from htrpn.sampler import per_level_counts, sample_hsamp, sample_random
from htrpn.simharness import batch_statistics_experiment, coverage_experiment, trial_seed

log = logging.getLogger("htrpn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _clean(obj: Any) -> Any:
    """Make a report JSON-safe: non-finite floats become null, tuples lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def csv_text(header: list[str] | tuple[str, ...], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def parse_image_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            w = h = int(parts[0])
        elif len(parts) == 2:
            w, h = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise argparse.ArgumentTypeError(f"image size must be N or WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"image size must be positive, got {text!r}")
    return (w, h)


def cmd_anchors(cfg: RunConfig) -> int:
    w, h = cfg.experiment.image_size
    anchors = generate_anchors(cfg.pyramid, w, h)
    rows = []
    for lv, count in zip(cfg.pyramid.levels, anchors.counts()):
        r, c = feature_shape(w, h, lv.stride)
        rows.append((lv.name, lv.stride, r, c, count))
    text = csv_text(["level", "stride", "rows", "cols", "anchors"], rows)
    if cfg.out_dir:
        _write(cfg.out_dir, "anchors.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sample_compare(cfg: RunConfig) -> int:
    exp = cfg.experiment
    w, h = exp.image_size
    anchors = generate_anchors(cfg.pyramid, w, h)
    match = match_anchors(anchors, [])
    names = cfg.pyramid.names
    pools = match.pool_sizes()
    total_pool = sum(pools)
    rows = []
    for t in range(exp.trials):
        seed = trial_seed(cfg.seed, t, 1)
        rnd = per_level_counts(match, sample_random(match, exp.m, np.random.default_rng(seed)))
        hs = per_level_counts(match, sample_hsamp(match, exp.m, np.random.default_rng(seed)))
        rows.append((t, *rnd, *hs))
    arr = np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 2 * len(names))
    n = len(names)
    drawn = min(exp.m, total_pool)

    def agg(block: np.ndarray) -> dict[str, Any]:
        sd = block.std(axis=0, ddof=1) if len(block) > 1 else np.zeros(block.shape[1])
        return {"mean": block.mean(axis=0).tolist(), "std": sd.tolist()}

    summary = {
        "m": exp.m,
        "trials": exp.trials,
        "image_size": list(exp.image_size),
        "levels": names,
        "negative_pools": pools,
        "random": agg(arr[:, :n]),
        "hsamp": agg(arr[:, n:]),
        "random_expected": [drawn * p / total_pool if total_pool else 0.0 for p in pools],
    }
    header = ["trial"] + [f"random_{s}" for s in names] + [f"hsamp_{s}" for s in names]
    text = csv_text(header, rows)
    if cfg.out_dir:
        _write(cfg.out_dir, "sample_compare.csv", text)
        _write(cfg.out_dir, "sample_compare.json", dumps(summary))
        sys.stdout.write(dumps(summary))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_losscheck(cfg: RunConfig, perturb: float = 0.0) -> int:
    report = run_losscheck(
        cfg.loss,
        seed=cfg.seed,
        grad_batches=cfg.experiment.losscheck_batches,
        oracle_batches=cfg.experiment.oracle_batches,
        perturb=perturb,
    )
    text = dumps(report)
    if cfg.out_dir:
        _write(cfg.out_dir, "losscheck.json", text)
    sys.stdout.write(text)
    log.info("%s: max gradient relative error %.3e", report["status"], report["max_grad_rel_error"])
    return EXIT_OK if report["status"] == "PASS" else EXIT_FAIL


def simulate(cfg: RunConfig) -> dict[str, str]:
    """Run both experiments; returns ``file name -> content``."""
    exp = cfg.experiment
    cov = coverage_experiment(
        cfg.scene,
        exp.trials,
        exp.coverage_iou,
        spec=cfg.pyramid,
        sample_cfg=cfg.sample,
        workers=exp.workers,
    )
    stats = batch_statistics_experiment(
        cfg.scene,
        exp.stats_scenes,
        cfg.sample.strategy,
        spec=cfg.pyramid,
        sample_cfg=cfg.sample,
        workers=exp.workers,
    )
    stat_rows = stats.pop("rows")
    cov_rows = list(cov.rows)
    cov_rows.append(("mean", "", cov.p_random, cov.p_hsamp))
    cov_rows.append(("stderr", "", cov.se_random, cov.se_hsamp))
    config = cfg.to_dict()
    config["experiment"].pop("workers")
    summary = {
        "config": config,
        "coverage": {**cov.summary(), "z_paired": cov.z_diff},
        "batch_stats": stats,
    }
    return {
        "coverage.csv": csv_text(["trial", "n_novel", "covered_random", "covered_hsamp"], cov_rows),
        "batch_stats.csv": csv_text(
            ["scene", "label0", "label1", "label2", "fg_bg_ratio"],
            [(*r[:4], "" if not math.isfinite(r[4]) else r[4]) for r in stat_rows],
        ),
        "simulate.json": dumps(summary),
    }


def cmd_simulate(cfg: RunConfig) -> int:
    files = simulate(cfg)
    if cfg.out_dir:
        for name, text in files.items():
            _write(cfg.out_dir, name, text)
    sys.stdout.write(files["simulate.json"])
    return EXIT_OK


def cmd_stats(cfg: RunConfig, annotations: Path, split: Path | None) -> int:
    held_out, base = load_split(split) if split else ([], None)
    ds = load_coco(annotations, held_out, base)
    stats = pool_stats(ds, cfg.pyramid, coverage_iou=cfg.experiment.coverage_iou)
    names = stats.level_names
    rows = [(r[0], names[r[1]], *r[2:]) for r in stats.rows]
    text = csv_text(POOL_CSV_FIELDS, rows)
    summary = {**stats.summary(), "per_image": list(stats.images), "dropped_annotations": ds.dropped}
    if cfg.out_dir:
        _write(cfg.out_dir, "pool_stats.csv", text)
        _write(cfg.out_dir, "pool_stats.json", dumps(summary))
        sys.stdout.write(dumps(summary))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config (default: $HTRPN_CONFIG or built-in)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--trials", type=int, help="Monte-Carlo trials")
    common.add_argument("--m", type=int, help="negatives to draw per trial (sample-compare)")
    common.add_argument("--image-size", type=parse_image_size, help="N or WxH pixels")
    common.add_argument("--thre-cls", type=float, help="classification gate for label 2")
    common.add_argument("--phi", type=float, help="contrastive IoU cut-off")
    common.add_argument("--tau", type=float, help="contrastive temperature")
    common.add_argument("--rank-op", choices=["max", "sum"], help="objectness combine operator")
    common.add_argument("--out-dir", type=Path, help="write reports here")
    common.add_argument("--workers", type=int, help="worker processes for Monte-Carlo runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="htrpn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("anchors", parents=[common], help="per-level anchor counts")
    sub.add_parser("sample-compare", parents=[common], help="random vs balanced negative draws")
    lc = sub.add_parser("losscheck", parents=[common], help="gradient and oracle checks")
    lc.add_argument(
        "--perturb",
        type=float,
        nargs="?",
        const=1e-3,
        default=0.0,
        help="scale the analytic gradient by 1+PERTURB (negative control)",
    )
    sub.add_parser("simulate", parents=[common], help="coverage and batch-statistics experiments")
    st = sub.add_parser("stats", parents=[common], help="anchor-pool statistics for COCO annotations")
    st.add_argument("annotations", type=Path, help="COCO annotation JSON")
    st.add_argument("--split", type=Path, help='JSON {"held_out": [...], "base": [...]}')
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = with_overrides(
            load_config(args.config),
            seed=args.seed,
            trials=args.trials,
            m=args.m,
            image_size=args.image_size,
            thre_cls=args.thre_cls,
            phi=args.phi,
            tau=args.tau,
            rank_op=args.rank_op,
            out_dir=args.out_dir,
            workers=args.workers,
        )
        if cfg.experiment.trials < 1:
            raise ConfigError("--trials must be at least 1")
        if cfg.experiment.m < 0:
            raise ConfigError("--m must be non-negative")
        if args.command == "anchors":
            return cmd_anchors(cfg)
        if args.command == "sample-compare":
            return cmd_sample_compare(cfg)
        if args.command == "losscheck":
            return cmd_losscheck(cfg, args.perturb)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "stats":
            return cmd_stats(cfg, args.annotations, args.split)
    except (ValueError, OSError) as exc:
        print(f"htrpn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
