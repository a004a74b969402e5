"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import experiments
from .config import ExperimentConfig, load_config
from .exceptions import (ConfigError, DimensionError, DivergenceError, DomainError, EstimatorError,
                         NonConvergenceError, NumericalError)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

COMMANDS = {
    "estimate": experiments.run_estimate,
    "predict": experiments.run_predict,
    "compare": experiments.run_compare,
    "mc-study": experiments.run_mc_study,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="robust-rmt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["check-weights"]:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="flat key = value configuration file")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--out")
        cmd.add_argument("--trials", type=int)
        cmd.add_argument("--threads", type=int)
        if name == "check-weights":
            cmd.add_argument("--weight", help="weight function spec, e.g. 'min_lin_inv(5)'")
    return parser


def _last_iterate(err):
    if isinstance(err, DivergenceError):
        return err.last_iterate
    if isinstance(err, EstimatorError):
        return err.diagnostics.get("last_iterate")
    sol = getattr(err, "solution", None)
    for attr in ("point", "delta_hat", "last_iterate"):
        if sol is not None and getattr(sol, attr, None) is not None:
            return getattr(sol, attr)
    return None


def _dump_diagnostics(out, command, err):
    try:
        os.makedirs(out, exist_ok=True)
        last = _last_iterate(err)
        record = {"command": command, "error": type(err).__name__, "message": str(err)}
        if last is not None:
            record["last_iterate"] = np.real(np.asarray(last)).tolist()
        with open(os.path.join(out, "diagnostics.json"), "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "trials": args.trials, "threads": args.threads}
    if getattr(args, "weight", None):
        overrides["weight"] = args.weight
    out = args.out or "out"
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
        out = cfg.out
        if args.command == "check-weights":
            art, ok = experiments.run_check_weights(cfg)
            print(art.summary["report"])
            return EXIT_OK if ok else EXIT_CONFIG
        art = COMMANDS[args.command](cfg)
    except (ConfigError, DimensionError, DomainError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, DivergenceError, EstimatorError, NumericalError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        _dump_diagnostics(out, args.command, err)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    for name in art.files:
        print(os.path.join(art.out, name))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
