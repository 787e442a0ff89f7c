"""Command-line interface.

Subcommands mirror the five-stage protocol plus utilities::

    fedunlearn pipeline  --config exp.cfg          # all five stages + reports
    fedunlearn train     --config exp.cfg          # Training stage only
    fedunlearn unlearn   --config exp.cfg          # UL-Subtraction
    fedunlearn distill   --config exp.cfg          # UL-Distillation
    fedunlearn posttrain --config exp.cfg          # Post-Training
    fedunlearn retrain   --config exp.cfg          # Re-Training baseline
    fedunlearn evaluate  --config exp.cfg --stage distillation
    fedunlearn report    --config exp.cfg --format svg

Exit codes: 0 success, 2 config error, 3 stage failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from . import federation, pipeline
from .config import default_config, parse_config
from .errors import ConfigurationError, FedUnlearnError
from .evaluation import EvalContext, reports_to_csv, stage_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_IO = 4

COMMAND_TO_STAGE = {
    "train": "training",
    "unlearn": "subtraction",
    "distill": "distillation",
    "posttrain": "posttraining",
    "retrain": "retraining",
}


def _add_common(parser: argparse.ArgumentParser, with_stage: bool = False) -> None:
    parser.add_argument("--config", metavar="PATH", help="experiment config file")
    parser.add_argument("--out", metavar="DIR", help="output directory override")
    parser.add_argument(
        "--seed", type=int, metavar="OVERRIDE", help="override the master seed"
    )
    parser.add_argument(
        "--resume", action="store_true", help="reuse matching checkpoints if present"
    )
    parser.add_argument(
        "--format",
        action="append",
        choices=("csv", "json", "svg"),
        help="report format (repeatable)",
    )
    if with_stage:
        parser.add_argument(
            "--stage",
            choices=pipeline.STAGE_KEYS,
            default="training",
            help="which stage checkpoint to evaluate",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedunlearn",
        description="Deterministic federated unlearning simulation harness",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("pipeline", "run all five stages and emit reports"),
        ("train", "run the Training stage"),
        ("unlearn", "subtract the attacker's update history"),
        ("distill", "repair the subtracted model by distillation"),
        ("posttrain", "continue training without the attacker"),
        ("retrain", "train the from-scratch baseline"),
        ("report", "rebuild reports from existing checkpoints"),
    ):
        _add_common(sub.add_parser(name, help=helptext))
    _add_common(sub.add_parser("evaluate", help="evaluate one stage checkpoint"), with_stage=True)
    return parser


def _load_config(args):
    if args.config:
        return parse_config(args.config, seed_override=args.seed)
    return default_config(seed_override=args.seed)


def _out_dir(args, config) -> Path:
    out = Path(args.out) if args.out else Path(config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_pipeline(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, config)
    manifest = pipeline.run_pipeline(
        config,
        out_dir=out,
        resume=args.resume or None,
        formats=tuple(args.format) if args.format else None,
    )
    reports = pipeline.build_reports(config, out)
    sys.stdout.write(reports_to_csv(reports))
    print(f"manifest: {out / pipeline.MANIFEST_FILE}")
    print(f"config hash: {manifest.config_hash}")
    return EXIT_OK


def _cmd_stage(args, stage_key: str) -> int:
    config = _load_config(args)
    out = _out_dir(args, config)
    pipeline.run_stage(stage_key, config, out, resume=args.resume)
    print(f"stage '{stage_key}' complete: {pipeline.checkpoint_path(out, stage_key)}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, config)
    model, meta = pipeline.load_stage_checkpoint(out, args.stage, config)
    exp = federation.prepare_experiment(config)
    original, _ = pipeline.load_stage_checkpoint(out, "training", config)
    try:
        reference, _ = pipeline.load_stage_checkpoint(out, "retraining", config)
    except FedUnlearnError:
        reference = None
    context = EvalContext(
        test_set=exp.test_set,
        attack_set=exp.attack_set,
        spec=exp.spec,
        original_model=original,
        reference_model=reference,
    )
    report = stage_report(
        pipeline.STAGE_NAME_BY_KEY[args.stage],
        model,
        context,
        wall_time_ms=meta.get("wall_time_ms", 0),
    )
    sys.stdout.write(reports_to_csv([report]))
    return EXIT_OK


def _cmd_report(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, config)
    reports = pipeline.build_reports(config, out)
    formats = tuple(args.format) if args.format else config.output.formats
    training_rows = pipeline.read_history_rows(out / "history_training.csv")
    distill_rows = pipeline.read_history_rows(out / pipeline.DISTILL_HISTORY_FILE)
    for fmt in formats:
        path = pipeline.emit_report(
            reports,
            fmt,
            out / f"{pipeline.REPORT_BASENAME}.{fmt}",
            config=config,
            training_rows=training_rows,
            distill_rows=distill_rows,
        )
        print(f"wrote {path}")
    sys.stdout.write(reports_to_csv(reports))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pipeline":
            return _cmd_pipeline(args)
        if args.command in COMMAND_TO_STAGE:
            return _cmd_stage(args, COMMAND_TO_STAGE[args.command])
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "report":
            return _cmd_report(args)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedUnlearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
