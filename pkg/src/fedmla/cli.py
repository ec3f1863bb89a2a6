"""Command-line entry point: ``fedmla <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    ablate,
    compare_ibn,
    evaluate_checkpoint,
    loo,
    make_dataset,
    summarize,
    sweep_bin_depth,
    sweep_clients,
)
from .fedsim import CheckpointError, load_checkpoint
from .metrics import write_csv
from .tensor.gradcheck import format_report, timed_gradcheck

log = logging.getLogger("fedmla")


def _seeds(text: str) -> List[int]:
    try:
        seeds = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seed list must hold non-negative integers")
    return seeds


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=_seeds, help="seed or comma-separated seeds, overriding the config")
    common.add_argument("--out", type=Path, help="output directory, overriding the config")
    common.add_argument("--threads", type=_positive, help="client worker threads, overriding the config")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="fedmla", description="Federated segmentation with "
                                     "model-level attention and batch-instance normalization.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    g.add_argument("--shapes", type=_positive, default=20, help="random shapes per op")

    sub.add_parser("gen-data", parents=[common], help="export the synthetic federation dataset")

    lo = sub.add_parser("loo", parents=[common], help="leave-one-domain-out evaluation")
    lo.add_argument("--method", choices=["fedavg-baseline", "mla-only", "bin-only", "mla-bin"])

    sub.add_parser("ablate", parents=[common], help="baseline / MLA / BIN / MLA+BIN")

    sb = sub.add_parser("sweep-bin-depth", parents=[common], help="BIN depth 0..levels")
    sb.add_argument("--depths", type=_seeds, help="comma-separated depths (default 0..levels)")

    sc = sub.add_parser("sweep-clients", parents=[common], help="number of seen client domains")
    sc.add_argument("--counts", type=_seeds, help="comma-separated client counts (default 1..k)")

    sub.add_parser("compare-ibn", parents=[common], help="BIN blocks versus IBN blocks")

    ev = sub.add_parser("eval", parents=[common], help="score a stored global model")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--bin-depth", type=int, help="BIN depth of the stored model (default from config)")
    ev.add_argument("--block-kind", choices=["plain", "bin", "ibn"], help="block kind of the stored model")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    run = {}
    if args.seed is not None:
        run["seeds"] = tuple(args.seed)
    if args.out is not None:
        run["out"] = str(args.out)
    if args.threads is not None:
        run["threads"] = args.threads
    if getattr(args, "method", None):
        run["method"] = args.method
    return cfg.with_overrides(run=run) if run else cfg


def _print_summary(result) -> None:
    for method, by_seed in summarize(result.unseen).items():
        vals = ", ".join(f"seed {s}: {v:.2f}" for s, v in sorted(by_seed.items()))
        print(f"{method:<18} unseen DSC  {vals}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.run.out)

    try:
        if args.command == "gradcheck":
            reports, elapsed = timed_gradcheck(n_shapes=args.shapes, seed=cfg.run.seeds[0])
            print(format_report(reports, elapsed))
            return 0 if all(r.passed for r in reports) else 1
        if args.command == "gen-data":
            for s in cfg.run.seeds:
                ds = make_dataset(cfg, s)
                path = ds.export(out / f"data-seed{s}")
                print(f"seed {s}: {path} sha256 {ds.checksum()}")
            return 0
        if args.command == "eval":
            params = load_checkpoint(args.checkpoint)
            net_cfg = cfg.net_config(bin_depth=args.bin_depth, block_kind=args.block_kind)
            reports = evaluate_checkpoint(cfg, params, net_cfg, cfg.run.seeds)
            text = write_csv(reports)
            out.mkdir(parents=True, exist_ok=True)
            (out / "eval.csv").write_text(text)
            sys.stdout.write(text)
            return 0
        commands = {"loo": loo, "ablate": ablate, "sweep-bin-depth": sweep_bin_depth,
                    "sweep-clients": sweep_clients, "compare-ibn": compare_ibn}
        kwargs = {}
        if args.command == "sweep-bin-depth" and args.depths:
            kwargs["depths"] = args.depths
        if args.command == "sweep-clients" and args.counts:
            kwargs["counts"] = args.counts
        result = commands[args.command](cfg, out_dir=out, **kwargs)
        _print_summary(result)
        print(f"wrote {out / (args.command + '.csv')}")
        return 0
    except (CheckpointError, ValueError, RuntimeError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
