#!/usr/bin/env python3
"""
MAMLCon command line

Subcommands: train, eval, sweep-k, synth, features, report.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from . import __version__
from .data import MfccConfig, SyntheticSpec, build_archives, load_stem_map, synth_generate, write_archive
from .error_handling import MamlconError, format_error_for_user, log_failures, setup_error_handling
from .experiment_config import get_config_loader, load_experiment_config
from .harness import (
    RunConfig,
    evaluate_checkpoint,
    format_report,
    read_results_csv,
    run_experiment,
    sweep_k,
    train_checkpoint,
)
from .metalearn import load_checkpoint

logger = logging.getLogger(__name__)

DATA_SOURCES = ("archive", "train_archive", "test_archive", "synthetic")


def int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", dest="run_config", default=None,
                        help="Experiment preset name or JSON file (default: MAMLCON_CONFIG or 'default')")
    parser.add_argument("--scenario", help="Scenario N<int>:CS<int>:CA<int>")
    parser.add_argument("--shots", type=int, help="Support examples per class (K)")
    parser.add_argument("--seeds", type=int_list, help="Comma-separated seed list")
    parser.add_argument("--archive", help="Feature archive to split into meta-train/held-out classes")
    parser.add_argument("--train-archive", help="Meta-train feature archive (with --test-archive)")
    parser.add_argument("--test-archive", help="Held-out feature archive (with --train-archive)")
    parser.add_argument("--meta-iterations", type=int, help="Outer-loop iterations")
    parser.add_argument("--workers", type=int, help="Seeds evaluated concurrently")


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="mamlcon",
        description="MAMLCon: meta-learning for few-shot continual word learning",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mamlcon synth --classes 30 --dim 16 --per-class 40 --sep 3 --out data/synth.mcfa
  mamlcon train --config synthetic --algo mamlcon --out runs/theta.mcfa
  mamlcon eval --config synthetic --ckpt runs/theta.mcfa --episodes 20 --seeds 0,1,2 --csv runs/eval.csv
  mamlcon eval --config synthetic --algo none --csv runs/none.csv
  mamlcon sweep-k --config commands --ks 1,5,20,50,100 --csv runs/sweep.csv
  mamlcon features --wav-dir recordings/ --stems stems.tsv --out data/words.mcfa
  mamlcon report --csv runs/eval.csv runs/none.csv

Environment Variables:
  MAMLCON_CONFIG      - Experiment preset or file (default, commands, synthetic)
  MAMLCON_CONFIG_DIR  - Directory holding experiment_*.json presets (default: config)
  MAMLCON_ERROR_LOG   - ERROR-level log file (default: mamlcon_errors.log, empty disables)
  LOG_LEVEL           - Logging level (DEBUG, INFO, WARNING, ERROR)
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default=os.getenv("LOG_LEVEL", "INFO"),
        help="Set logging level (default: INFO, or LOG_LEVEL env var)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Meta-train and write a θ* checkpoint")
    _add_run_options(train)
    train.add_argument("--algo", choices=["mamlcon", "oml"], help="Meta-learning algorithm")
    train.add_argument("--out", help="Checkpoint path (default: output.checkpoint)")

    evaluate = commands.add_parser("eval", help="Evaluate on held-out episodes and write a results CSV")
    _add_run_options(evaluate)
    evaluate.add_argument("--ckpt", help="Deploy this checkpoint instead of meta-training")
    evaluate.add_argument("--algo", choices=["mamlcon", "oml", "none"], help="Algorithm when no checkpoint is given")
    evaluate.add_argument("--episodes", type=int, help="Held-out episodes per seed")
    evaluate.add_argument("--csv", help="Results CSV (default: output.csv)")

    sweep = commands.add_parser("sweep-k", help="Accuracy as the shot count K varies")
    _add_run_options(sweep)
    sweep.add_argument("--ks", type=int_list, required=True, help="Comma-separated K values")
    sweep.add_argument("--ckpt", help="Deploy this checkpoint for every K instead of meta-training")
    sweep.add_argument("--algo", choices=["mamlcon", "oml", "none"], help="Algorithm when no checkpoint is given")
    sweep.add_argument("--episodes", type=int, help="Held-out episodes per seed")
    sweep.add_argument("--csv", help="Sweep CSV")

    synth = commands.add_parser("synth", help="Generate a synthetic Gaussian-cluster archive")
    synth.add_argument("--classes", type=int, default=30)
    synth.add_argument("--dim", type=int, default=16)
    synth.add_argument("--per-class", type=int, default=40)
    synth.add_argument("--sep", type=float, default=3.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--informative-dims", type=int, default=0,
                       help="Put all class means in a shared random subspace of this dimension (0: all dims)")
    synth.add_argument("--out", required=True)

    features = commands.add_parser("features", help="Extract MFCC archives from <word>/*.wav recordings")
    features.add_argument("--wav-dir", required=True)
    features.add_argument("--stems", required=True, help="Tab-separated word -> stem map")
    features.add_argument("--out", required=True, help="Base path; writes <base>.train and <base>.test archives")
    features.add_argument("--test-fraction", type=float, default=0.5)
    features.add_argument("--seed", type=int, default=0)

    report = commands.add_parser("report", help="Render results CSVs as a retention table")
    report.add_argument("--csv", nargs="+", required=True)
    report.add_argument("--out", help="Also write the table to this file")

    return parser.parse_args(argv)


def setup_logging(log_level: str) -> logging.Logger:
    """Configure the root logger: stderr console handler plus an ERROR file handler."""
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(numeric_level)
    root_logger.addHandler(console_handler)

    error_log = os.getenv("MAMLCON_ERROR_LOG", "mamlcon_errors.log")
    if error_log:
        try:
            error_handler = logging.FileHandler(error_log, encoding="utf-8", delay=True)
            error_handler.setFormatter(formatter)
            error_handler.setLevel(logging.ERROR)
            root_logger.addHandler(error_handler)
        except OSError as e:
            logging.warning(f"Could not create error log file: {e}")

    logger.debug(f"Logging configured at level: {log_level}")
    return logger


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "scenario": getattr(args, "scenario", None),
        "k": getattr(args, "shots", None),
        "seeds": getattr(args, "seeds", None),
        "algorithm": getattr(args, "algo", None),
        "episodes_per_eval": getattr(args, "episodes", None),
        "workers": getattr(args, "workers", None),
        "meta": {"meta_iterations": getattr(args, "meta_iterations", None)},
    }
    return overrides


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Preset or file values with command-line flags on top."""
    raw = load_experiment_config(args.run_config, _overrides(args))
    if args.archive or args.train_archive or args.test_archive:
        data = {key: value for key, value in raw.get("data", {}).items() if key not in DATA_SOURCES}
        if args.archive:
            data["archive"] = args.archive
        if args.train_archive:
            data["train_archive"] = args.train_archive
        if args.test_archive:
            data["test_archive"] = args.test_archive
        raw["data"] = data
    return RunConfig.from_dict(raw)


@log_failures
def command_train(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    path = train_checkpoint(cfg, args.out)
    print(path)
    return 0


@log_failures
def command_eval(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    if args.ckpt:
        rows = evaluate_checkpoint(cfg, args.ckpt, args.csv)
    else:
        rows = run_experiment(cfg, csv_path=args.csv)
    print(format_report(rows), end="")
    return 0


@log_failures
def command_sweep_k(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    initial = model = None
    if args.ckpt:
        initial, model, extra = load_checkpoint(args.ckpt)
        cfg = replace(cfg, algorithm=extra.get("algorithm", cfg.algorithm))
    for row in sweep_k(cfg, args.ks, args.csv, initial_params=initial, model=model):
        print(f"K={row.k:<4d} {row.algorithm:<8s} {row.mean_accuracy:6.2f} ± {row.std_accuracy:.2f}")
    return 0


@log_failures
def command_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(n_classes=args.classes, dim=args.dim, examples_per_class=args.per_class,
                         cluster_separation=args.sep, seed=args.seed,
                         informative_dims=args.informative_dims)
    path = write_archive(synth_generate(spec), args.out)
    logger.info(f"✅ Wrote synthetic archive {path} ({spec.n_classes} classes x {spec.examples_per_class})")
    print(path)
    return 0


@log_failures
def command_features(args: argparse.Namespace) -> int:
    stems = load_stem_map(args.stems)
    train_path, test_path = build_archives(args.wav_dir, stems, args.out, MfccConfig(),
                                           test_fraction=args.test_fraction, seed=args.seed)
    print(train_path)
    print(test_path)
    return 0


@log_failures
def command_report(args: argparse.Namespace) -> int:
    rows = [row for path in args.csv for row in read_results_csv(path)]
    text = format_report(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


COMMANDS = {
    "train": command_train,
    "eval": command_eval,
    "sweep-k": command_sweep_k,
    "synth": command_synth,
    "features": command_features,
    "report": command_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = parse_arguments(argv)
    setup_logging(args.log_level)
    setup_error_handling()

    if args.command in ("train", "eval", "sweep-k"):
        loader = get_config_loader()
        for name in loader.list_available_configs():
            info = loader.get_config_info(name) or {}
            logger.debug(f"Preset '{name}': {info.get('description', 'unreadable')}")

    try:
        return COMMANDS[args.command](args)
    except MamlconError as e:
        print(format_error_for_user(e), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        logger.info("🛑 Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
