"""Command-line entry point.

Every subcommand writes CSV files with headers.  On failure a single JSON
line ``{"error": ..., "where": ..., "message": ...}`` goes to stderr and the
exit code is nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import expected_best_of_subsample, read_grid_csv
from .harness import (ConfigError, aggregate, emit_plot_data, load_config, load_streams, run_experiment, run_grid,
                      wis_oracle_experiment, write_wis_oracle)


def _with_overrides(args):
    cfg = load_config(args.config)
    if args.seeds:
        if len(set(args.seeds)) != len(args.seeds) or min(args.seeds) < 0:
            raise ConfigError("seeds", "must be distinct nonnegative integers")
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_run(args):
    cfg = _with_overrides(args)
    streams = run_experiment(cfg)
    return {"output_dir": cfg.output_dir, "seeds": list(streams),
            "env_steps": {str(s): (r[-1].env_steps if r else 0) for s, r in streams.items()}}


def cmd_grid(args):
    cfg = _with_overrides(args)
    results = run_grid(cfg)
    return {"output_dir": cfg.output_dir, "runs": len(results),
            "env_steps": int(sum(r.env_steps for r in results))}


def cmd_aggregate(args):
    streams = load_streams(args.runs)
    curve = aggregate(streams, args.checkpoints)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_plot_data(curve, out)
    return {"curve": str(out), "streams": len(streams)}


def cmd_subsample(args):
    results = read_grid_csv(args.grid)
    # best (lr, c2) cell is judged on its mean over seeds
    cells = {}
    for r in results:
        cells.setdefault((r.lr, r.c2), []).append(r.final_return)
    returns = np.array([np.mean(v) for v in cells.values()])
    sizes = args.n or [1, 2, 5, 10, 20, len(returns)]
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "expected_best"])
        for n in sizes:
            if n > len(returns):
                continue
            w.writerow([n, repr(expected_best_of_subsample(returns, n, args.repeats, rng))])
    return {"table": str(out), "cells": len(returns)}


def cmd_wis_oracle(args):
    res = wis_oracle_experiment(n_samples=args.samples, repeats=args.repeats, seed=args.seed)
    write_wis_oracle(res, args.out)
    return {"output_dir": args.out, "medians": [float(m) for m in res.medians()]}


class _Parser(argparse.ArgumentParser):
    """Usage errors also leave a JSON error line."""

    def error(self, message):
        print(json.dumps({"error": "usage", "where": self.prog, "message": message}), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hoof", description="Hyperparameter optimisation on the fly for policy gradients")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, fn, help_ in (("run", cmd_run, "train one learner per seed"),
                            ("grid", cmd_grid, "A2C grid search over (lr, c2)")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML run config")
        s.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
        s.add_argument("--out", help="override the config's output directory")
        s.set_defaults(func=fn)

    s = sub.add_parser("aggregate", help="median/quartile curve over a run directory")
    s.add_argument("--runs", required=True, help="directory holding seed_*.csv")
    s.add_argument("--checkpoints", type=int, default=20)
    s.add_argument("--out", required=True, help="curve CSV path")
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("subsample", help="expected best return of n random grid points")
    s.add_argument("--grid", required=True, help="grid.csv written by the grid command")
    s.add_argument("--n", type=int, nargs="+")
    s.add_argument("--repeats", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_subsample)

    s = sub.add_parser("wis-oracle", help="WIS ordering experiment on Gaussian targets")
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--repeats", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_wis_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "where": exc.where, "message": exc.message}), file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError) as exc:
        print(json.dumps({"error": type(exc).__name__, "where": args.command, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0
