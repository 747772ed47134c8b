"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import DataError, NumericError
from .harness.config import RunConfig, load_config
from .harness.pipeline import STAGES, Pipeline, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration (defaults built in)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes within a stage")
    p.add_argument("--out", type=Path, default=Path("out"), help="run directory")
    p.add_argument("--force", action="store_true", help="rerun even when the stage manifest matches")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lesionkit", description="Lesion classification pipeline on multi-modality volumes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        if stage in ("predict", "evaluate"):
            p.add_argument("--split", choices=("val", "test"), default="val")
        if stage == "evaluate":
            p.add_argument("--predictions", type=Path, help="prediction CSV to score instead of the run's own")
            p.add_argument("--labels", type=Path, help="findings CSV holding the labels")
    p = sub.add_parser("roc-plot", help="draw ROC curves of chosen models from a prediction CSV")
    _common(p)
    p.add_argument("--predictions", type=Path, help="prediction CSV (default: the run's val predictions)")
    p.add_argument("--labels", type=Path, help="findings CSV (default: the run's refined findings)")
    p.add_argument("--models", help="comma-separated model ids (default: ensemble and best members)")
    p = sub.add_parser("run", help="run every stage in order")
    _common(p)
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _dispatch(args) -> None:
    if args.jobs < 1:
        raise DataError("--jobs must be >= 1")
    cfg = _config(args)
    pipe = Pipeline(cfg, args.out, args.jobs)
    if args.command == "run":
        pipe.run_all(force=args.force)
    elif args.command == "roc-plot" or (args.command == "evaluate" and (args.predictions or args.labels)):
        split = getattr(args, "split", "val")
        preds = args.predictions or pipe.p("predictions", f"{split}_predictions.csv")
        labels = args.labels or pipe.p("preprocessed", "findings.csv")
        models = [m for m in args.models.split(",") if m] if getattr(args, "models", None) else None
        evaluate(preds, labels, pipe.p("eval"), models)
    elif args.command in ("predict", "evaluate"):
        pipe.run_stage(args.command, args.force, split=args.split)
    else:
        pipe.run_stage(args.command, args.force)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except NumericError as exc:
        print(f"lesionkit: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"lesionkit: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
