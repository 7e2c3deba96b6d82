"""Command-line entry point: ``viewhall <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline as P
from .autodiff.tensor import NonFiniteError
from .config import ConfigError, ExperimentConfig, load_config, validate
from .dataset import DatasetError
from .vtn import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

SUBCOMMANDS = ("gen-data", "train-vtn", "hallucinate", "train-seg", "adapt", "evaluate", "run-all", "report")


def _pitch_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated degrees, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (comments allowed)")
    common.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    common.add_argument("--profile", choices=("paper", "desk"), help="default hyperparameter set")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded numerics for bit-identical reruns")
    common.add_argument("--out", metavar="DIR", help="artifact root")
    common.add_argument("--pitch", type=_pitch_list, metavar="LIST", help="target pitches, e.g. 10,20,30")
    common.add_argument("--domain", type=float, metavar="DEG",
                        help="restrict to one target pitch, with a view network trained for it alone")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="viewhall", description="Label transfer across camera pitch changes.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Profile defaults < config file < flags."""
    cfg = load_config(args.config, args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.deterministic:
        cfg.deterministic = True
    if args.pitch is not None:
        cfg.dataset.pitches = args.pitch
        if cfg.adapt_pitches is not None:
            cfg.adapt_pitches = [p for p in cfg.adapt_pitches if p in args.pitch] or None
    if args.domain is not None:
        cfg.vtn_mode = "single"
    validate(cfg, args.config or "<flags>")
    return cfg


def run(cfg: ExperimentConfig, command: str, domain: float | None = None) -> None:
    layout = P.Layout(cfg.out)
    stages = {
        "gen-data": lambda: P.gen_data(cfg, layout),
        "train-vtn": lambda: P.train_vtn(cfg, layout, domain),
        "hallucinate": lambda: P.hallucinate(cfg, layout, domain),
        "train-seg": lambda: P.train_seg(cfg, layout),
        "adapt": lambda: P.adapt(cfg, layout, domain),
        "evaluate": lambda: P.evaluate(cfg, layout, domain),
        "run-all": lambda: P.run_all(cfg, layout, domain),
        "report": lambda: P.report(cfg, layout),
    }
    limit = threadpool_limits(limits=1) if cfg.deterministic else contextlib.nullcontext()
    with limit:
        stages[command]()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run(cfg, args.command, args.domain)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.MissingArtifact, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
