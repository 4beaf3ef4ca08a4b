"""Command-line entry point: ``tacsnn run`` and ``tacsnn sweep``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, build, load_file, load_preset, preset_names
from .temporal import GroupSizeError, TemporalResolutionError
from .train import TrainingDiverged


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tacsnn", description="Temporal-aggregation SNN benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--preset", help="name of a shipped preset (see `tacsnn presets`)")
        src.add_argument("--config", type=Path, help="path to a YAML config file")
        p.add_argument("--seeds", type=_int_list, help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--epochs", type=_positive, help="override train.epochs")
        p.add_argument("--out", type=Path, help="directory for report.json, metrics.csv, summary.csv, figures/")
        p.add_argument("--no-figures", action="store_true", help="skip rendering figures")
        p.add_argument("--quiet", action="store_true", help="suppress progress and the summary table")

    run = sub.add_parser("run", help="run one configuration")
    common(run)
    run.add_argument("--k", type=_positive, help="group size for every tac / tac_tp layer")

    sweep = sub.add_parser("sweep", help="run a configuration once per group size")
    common(sweep)
    sweep.add_argument("--k-values", type=_int_list, required=True, help="comma-separated group sizes")

    sub.add_parser("presets", help="list shipped presets")
    return parser


def _load(args) -> tuple[dict, str]:
    if args.preset:
        return load_preset(args.preset), args.preset
    return load_file(args.config), args.config.stem


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0

    from .bench import execute
    from .report import format_table, write_outputs

    try:
        raw, name = _load(args)
        raw = apply_overrides(raw, k=getattr(args, "k", None), epochs=args.epochs, seeds=args.seeds)
        cfg = build(raw, name)
        if cfg.experiment == "train":
            cfg.model.output_timesteps()
    except ConfigError as exc:
        print(f"tacsnn: invalid config: {exc}", file=sys.stderr)
        return 2
    except (TemporalResolutionError, GroupSizeError) as exc:
        print(f"tacsnn: {exc}", file=sys.stderr)
        return 2

    if args.command == "sweep" and cfg.experiment != "train":
        print(f"tacsnn: sweep needs a train experiment, not {cfg.experiment}", file=sys.stderr)
        return 2

    def log(seed, m):
        if not args.quiet:
            print(f"[{cfg.name}] seed {seed} epoch {m.epoch + 1}: loss {m.train_loss:.4f} "
                  f"train {m.train_acc:.1f}% test {m.test_acc:.1f}% ({m.seconds:.2f}s)", file=sys.stderr)

    try:
        report = execute(cfg, args.k_values if args.command == "sweep" else None, log)
    except TrainingDiverged as exc:
        print(f"tacsnn: training diverged: {exc}", file=sys.stderr)
        return 3

    if args.out is not None:
        report = write_outputs(report, args.out, figures=not args.no_figures)
    if not args.quiet:
        print(format_table(report))
        if args.out is not None:
            print(f"wrote {args.out / 'report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
