"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .experiments import (
    ConfigError,
    build_model,
    load_config,
    read_observations,
    run_experiment,
    write_matrix_csv,
)
from .kalman import kalman_filter
from .models import LinearGaussian, ModelError, simulate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser, config_required=True):
    p.add_argument("--config", required=config_required, type=Path, help="JSON experiment configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for replicated filters")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovsmc", description="Online and batch variational SMC experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="run the experiment named in the config"))
    _common(sub.add_parser("simulate", help="simulate states and observations to CSV"))
    p = sub.add_parser("fit-ovsmc", help="online VSMC on the configured model")
    _common(p)
    p.add_argument("--data", type=Path, default=None, help="observation CSV (default: simulate)")
    p = sub.add_parser("fit-vsmc", help="batch VSMC sweeps on the configured record")
    _common(p)
    p.add_argument("--data", type=Path, default=None, help="observation CSV (default: simulate)")
    p.add_argument("--sweeps", type=int, default=None, help="override the number of sweeps")
    p = sub.add_parser("kalman", help="print the exact log-likelihood of a linear Gaussian config")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="observation CSV")
    _common(sub.add_parser("check", help="run the built-in property suite"), config_required=False)
    return parser


def _cmd_simulate(cfg, args):
    model, truth, _ = build_model(cfg)
    length = cfg.T if cfg.T is not None else cfg.steps
    if length is None:
        raise ConfigError("simulate needs 'T' or 'steps'")
    traj = simulate(model, truth, length, cfg.seed)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "states.csv", traj.states, "x")
    write_matrix_csv(out / "observations.csv", traj.observations, "y")
    print(out / "observations.csv")
    return EXIT_OK


def _cmd_kalman(cfg, args):
    model, truth, _ = build_model(cfg)
    if not isinstance(model, LinearGaussian):
        raise ConfigError("kalman needs a linear Gaussian experiment (lg1d, lg10d_batch, unbiasedness, meanfield)")
    y = read_observations(args.data, model.d_y)
    print(repr(kalman_filter(model, truth, y).total_loglik))
    return EXIT_OK


def _cmd_check(args):
    seed = 0 if args.seed is None else args.seed
    results = checks.run_all(seed=seed, threads=args.threads)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "check":
            return _cmd_check(args)
        cfg = load_config(args.config, args.seed)
        if getattr(args, "data", None) is not None and args.command != "kalman":
            cfg.data = str(args.data)
        if args.command == "simulate":
            return _cmd_simulate(cfg, args)
        if args.command == "kalman":
            return _cmd_kalman(cfg, args)
        method = None
        if args.command == "fit-ovsmc":
            method = "ovsmc"
        elif args.command == "fit-vsmc":
            method = "vsmc"
            if args.sweeps is not None:
                if args.sweeps < 0:
                    raise ConfigError("--sweeps must be non-negative")
                cfg.sweeps = args.sweeps
        if method is not None and cfg.experiment not in ("lg1d", "sv", "lg10d_batch"):
            raise ConfigError(f"{args.command} needs a learning experiment, not {cfg.experiment!r}")
        outcome = run_experiment(cfg, args.out, args.threads, method)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    if outcome.exit_code == EXIT_NUMERICAL:
        print(f"numerical failure: {outcome.summary.get('error')}", file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
