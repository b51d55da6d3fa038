"""Command-line front end: ``incsim <command> --config run.toml``.

Exit codes: 0 success, 1 configuration error, 2 training aborted, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .config import ConfigError, ExperimentConfig, build_config, load_config, parse_override
from .datasets import IdxFormatError, SplitError
from .network import ConfigurationError
from .strategies import TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "plan": "print the base/incremental class schedule for each seed",
        "base": "train and cache the base models",
        "incremental": "run the incremental sessions for every configured strategy",
        "ideal": "train the offline (all-classes) model and record its mAP@R",
        "report": "rebuild results.csv and the SVG chart from finished runs",
        "all": "ideal, base, incremental and report in one go",
    }
    for name, text in help_text.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("-c", "--config", help="flat TOML config file")
        p.add_argument("--preset", choices=("desk", "full"), help="named defaults applied under the file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, action="append", help="restrict to these seeds")
        p.add_argument("--strategy", action="append", help="restrict to these strategies")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {}
    for text in args.overrides:
        overrides.update(parse_override(text))
    if args.seed:
        overrides["seeds"] = args.seed
    if args.strategy:
        overrides["strategies"] = args.strategy
    if args.config:
        config = load_config(args.config, args.preset, overrides)
    else:
        config = build_config(overrides, args.preset)
    return config.validate(check_files=args.command != "report")


def _run(args) -> int:
    from . import experiment

    config = _config(args)
    if args.command == "plan":
        for seed in config.seeds:
            print(experiment.prepare_data(config, seed).plan.describe())
            print()
        return EXIT_OK
    if args.command == "base":
        for path in experiment.train_base_models(config):
            print(path)
        return EXIT_OK
    if args.command == "ideal":
        for seed in config.seeds:
            base, full = experiment.run_offline_ideal(config, seed)
            print(f"seed {seed}: ideal base-test {base:.4f}, entire-test {full:.4f}")
        return EXIT_OK
    if args.command == "report":
        for path in experiment.emit_report(config):
            print(path)
        return EXIT_OK
    if args.command == "incremental":
        runs = [experiment.run_experiment(config, s, seed) for seed in config.seeds for s in config.strategies]
    else:
        runs = experiment.run_all(config)
    for run in runs:
        omega = run.omega
        line = f"{run.strategy:>7} seed {run.seed}: {run.directory}"
        if omega is not None:
            line += (f"  omega_base {omega.omega_base:.3f} omega_new {omega.omega_new:.3f}"
                     f" omega_all {omega.omega_all:.3f}")
        print(line)
    if args.command == "incremental":
        experiment.emit_report(config)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, IdxFormatError, SplitError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
