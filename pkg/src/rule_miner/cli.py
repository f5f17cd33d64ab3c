"""Command-line entry point: ``rule-miner <command> [options]``.

Exit codes: 0 success, 1 I/O failure, 2 configuration or usage error, 3 numeric failure.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

from .checkpoint import RestoredRun
from .config.settings import RunConfig, load_config
from .data_io import save_synthetic
from .eval_harness import write_ablation_csv
from .exceptions import NumericError, RuleMinerError
from .pipeline import (
    ABLATION_FILE,
    BASELINE_METRICS_FILE,
    BASELINE_RULES_FILE,
    METRICS_FILE,
    RULES_FILE,
    RuleMiningPipeline,
    generate_synthetic,
    write_report,
    write_rules,
)
from .utils.logging import setup_logging


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def _configure_logging(config: RunConfig, args: argparse.Namespace) -> None:
    logging_config = config.logging
    if args.log_level:
        logging_config = replace(logging_config, level=args.log_level)
    setup_logging(logging_config, command=args.command, fingerprint=config.fingerprint()[:12])


def _load_run_config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else RunConfig().validate()


def _restore(args: argparse.Namespace) -> RestoredRun:
    run = RuleMiningPipeline.restore(args.checkpoint)
    _configure_logging(run.config, args)
    return run


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load_run_config(args.config)
    _configure_logging(config, args)
    synth = config.synth
    config = replace(config, synth=replace(
        synth,
        seed=synth.seed if args.seed is None else args.seed,
        rules=synth.rules if args.rules is None else args.rules,
        windows=synth.windows if args.windows is None else args.windows,
    ))
    dataset = generate_synthetic(config)
    windows_path, sidecar_path = save_synthetic(dataset, args.out)
    print(
        f"synth: windows={len(dataset.windows)} rules={len(dataset.planted_rules)} "
        f"seed={dataset.seed} out={Path(args.out)}"
    )
    logger.debug(f"Wrote {windows_path} and {sidecar_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _configure_logging(config, args)
    pipeline = RuleMiningPipeline(config)
    run = pipeline.train(pipeline.prepare(args.data))
    pipeline.save(run, args.out)
    history = run.result.history
    if history:
        print(f"train: steps={len(history)} loss={history[0].total:.6f}->{history[-1].total:.6f} "
              f"out={Path(args.out)}")
    else:
        print(f"train: steps=0 out={Path(args.out)}")
    return EXIT_OK


def cmd_mine(args: argparse.Namespace) -> int:
    run = _restore(args)
    pipeline = RuleMiningPipeline(run.config)
    mining = pipeline.mine(run, pipeline.prepare(args.data, sensor_stats=run.sensor_stats))
    path = write_rules(mining.rules, Path(args.out) / RULES_FILE)
    print(f"mine: rules={len(mining.rules)} out={path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = _restore(args)
    pipeline = RuleMiningPipeline(run.config)
    data = pipeline.prepare(args.data, sensor_stats=run.sensor_stats)
    report, mining = pipeline.evaluate(run, data)
    path = write_report(report, Path(args.out) / METRICS_FILE)
    write_rules(mining.rules, Path(args.out) / RULES_FILE)
    print(
        f"eval: accuracy={report.rule_mining_accuracy:.6f} coverage={report.rule_coverage:.6f} "
        f"rules={report.rule_count} out={path}"
    )
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    run = _restore(args)
    pipeline = RuleMiningPipeline(run.config)
    data = pipeline.prepare(args.data, sensor_stats=run.sensor_stats)
    paths = pipeline.export(run, data, args.out)
    print(f"export: files={len(paths)} out={Path(args.out)}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _configure_logging(config, args)
    pipeline = RuleMiningPipeline(config)
    rows = pipeline.ablate(pipeline.prepare(args.data), seeds=args.seeds)
    path = write_ablation_csv(rows, Path(args.out) / ABLATION_FILE)
    print(f"ablate: variants={len(rows)} failed={sum(row.status == 'failed' for row in rows)} "
          f"out={path}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _configure_logging(config, args)
    pipeline = RuleMiningPipeline(config)
    report, rules = pipeline.baseline(pipeline.prepare(args.data))
    out = Path(args.out)
    write_rules(rules, out / BASELINE_RULES_FILE)
    path = write_report(report, out / BASELINE_METRICS_FILE)
    print(
        f"baseline: accuracy={report.rule_mining_accuracy:.6f} coverage={report.rule_coverage:.6f} "
        f"rules={report.rule_count} out={path}"
    )
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "mine": cmd_mine,
    "eval": cmd_eval,
    "export": cmd_export,
    "ablate": cmd_ablate,
    "baseline": cmd_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rule-miner",
        description="Mine time-dependent rules from sensor windows with a dynamic transformer.",
    )
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        default=None,
        help="Override the configured logging level.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a planted-rule synthetic dataset.")
    synth.add_argument("--seed", type=int, default=None, help="Generator seed.")
    synth.add_argument("--rules", type=int, default=None, help="Number of planted rules.")
    synth.add_argument("--windows", type=int, default=None, help="Number of windows.")
    synth.add_argument("--config", default=None, help="Config for other generator settings.")
    synth.add_argument("--out", required=True, help="Output directory.")

    train = sub.add_parser("train", help="Train a model (checkpoint.json, training_log.csv).")
    train.add_argument("--config", required=True, help="YAML/JSON run configuration.")
    train.add_argument("--data", default=None, help="Data source overriding data.source.")
    train.add_argument("--out", required=True, help="Output directory.")

    for name, help_text in (
        ("mine", "Mine rules with a trained checkpoint (rules.json)."),
        ("eval", "Mine and score rules (metrics.json)."),
        ("export", "Write rule timeline, support and correlation CSVs."),
    ):
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--checkpoint", required=True, help="checkpoint.json or its dir.")
        command.add_argument("--data", default=None, help="Data source override.")
        command.add_argument("--out", required=True, help="Output directory.")

    ablate = sub.add_parser("ablate", help="Run the four-variant ablation grid (ablation.csv).")
    ablate.add_argument("--config", required=True, help="YAML/JSON run configuration.")
    ablate.add_argument("--data", default=None, help="Data source overriding data.source.")
    ablate.add_argument("--seeds", type=int, nargs="+", default=None,
                        help="Seeds overriding eval.seeds.")
    ablate.add_argument("--out", required=True, help="Output directory.")

    baseline = sub.add_parser("baseline", help="Score the Apriori baseline.")
    baseline.add_argument("--config", required=True, help="YAML/JSON run configuration.")
    baseline.add_argument("--data", default=None, help="Data source overriding data.source.")
    baseline.add_argument("--out", required=True, help="Output directory.")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except NumericError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuleMinerError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
