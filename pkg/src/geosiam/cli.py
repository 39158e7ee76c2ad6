"""Command-line entry point: ``geosiam <stage> [options]`` or ``geosiam run``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, RunConfig, load_config
from .pipeline import STAGES, Pipeline, PipelineError, run_pipeline

logger = logging.getLogger("geosiam")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--n-seeds", type=int, help="override the number of seeds")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--force", action="store_true", help="rerun stages even if their outputs are current")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--epochs", type=int, help="Siamese epochs")
    p.add_argument("--n-patches", type=int, help="unlabeled patches to sample")
    p.add_argument("--n-pairs", type=int, help="training pairs")
    p.add_argument("--alpha", type=float, help="coordinate loss weight")
    p.add_argument("--lam", type=float, help="weight decay for both networks")
    p.add_argument("--lr", type=float, help="Siamese learning rate")
    p.add_argument("--phase1-iters", type=int, help="fine-tuning iterations without atlas input")
    p.add_argument("--phase2-iters", type=int, help="fine-tuning iterations with atlas input")
    p.add_argument("--loss-modes", help="comma-separated Siamese loss modes")
    p.add_argument("--init-modes", help="comma-separated fine-tuning init modes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geosiam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run every stage in order, resuming from current outputs")
    _add_common(run)
    run.add_argument("--stop-after", choices=STAGES, help="stop after this stage")
    for stage in STAGES:
        _add_common(sub.add_parser(stage, help=f"run the {stage} stage only"))
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.n_seeds is not None:
        d["n_seeds"] = args.n_seeds
    if args.epochs is not None:
        d["siamese"]["epochs"] = args.epochs
    if args.n_patches is not None:
        d["sampler"]["n_patches"] = args.n_patches
    if args.n_pairs is not None:
        d["sampler"]["n_pairs"] = args.n_pairs
    for key, section, field in (
        ("alpha", "siamese", "alpha"),
        ("lr", "siamese", "lr"),
        ("phase1_iters", "segnet", "phase1_iters"),
        ("phase2_iters", "segnet", "phase2_iters"),
    ):
        if getattr(args, key) is not None:
            d[section][field] = getattr(args, key)
    if args.lam is not None:
        d["siamese"]["lam"] = d["segnet"]["lam"] = args.lam
    if args.loss_modes:
        d["siamese"]["loss_modes"] = [m.strip() for m in args.loss_modes.split(",") if m.strip()]
    if args.init_modes:
        d["segnet"]["init_modes"] = [m.strip() for m in args.init_modes.split(",") if m.strip()]
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError, TypeError, ValueError) as exc:
        print(f"geosiam: [config] {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            run_pipeline(cfg, args.out, stop_after=args.stop_after, force=args.force)
        else:
            pipe = Pipeline(cfg, args.out)
            pipe.write_run_info()
            pipe.run_stage(args.command, force=args.force)
    except PipelineError as exc:
        print(f"geosiam: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
