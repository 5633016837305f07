"""``oklab`` command line: run one experiment and write its metrics."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .cost import ALGORITHMS, CostModelParams, cost_predict
from .errors import OkLabError
from .harness import COLUMNS, PROBLEMS, ExperimentConfig, emit_metrics, rows_to_csv, run_experiment

log = logging.getLogger("oklab")


def build_parser():
    p = argparse.ArgumentParser(prog="oklab", description=__doc__)
    p.add_argument("--algorithm", choices=ALGORITHMS, default="oktopk")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--density", type=float, default=0.01)
    p.add_argument("--tau", type=int, default=64)
    p.add_argument("--tau-prime", type=int, default=32)
    p.add_argument("--bucket", type=int, default=4)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--problem", choices=PROBLEMS, default="lsq")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--rank-map", metavar="FILE")
    p.add_argument("--instrument-xi", action="store_true")
    p.add_argument("--wall-time", action="store_true",
                   help="record wall_ns (metrics are then no longer byte-reproducible)")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--cost-alpha", type=float, default=1.0)
    p.add_argument("--cost-beta", type=float, default=1.0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    seed = args.seed
    if os.environ.get("OKLAB_SEED"):
        seed = int(os.environ["OKLAB_SEED"])
    return ExperimentConfig(
        algorithm=args.algorithm, P=args.workers, n=args.n, density=args.density,
        tau=args.tau, tau_prime=args.tau_prime, bucket_size=args.bucket, steps=args.steps,
        problem=args.problem, seed=seed, transport=args.transport, rank_map=args.rank_map,
        instrumented=args.instrument_xi, lr=args.lr, wall_time=args.wall_time,
        out=args.out, fmt=args.format,
    )


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        params = CostModelParams(args.cost_alpha, args.cost_beta)
        result = run_experiment(cfg)
    except OkLabError as exc:
        print(f"oklab: error: {exc}", file=sys.stderr)
        return 2

    pred = cost_predict(cfg.algorithm, cfg.n, cfg.k, cfg.P, params)
    lo, hi = pred.total
    print(f"{cfg.algorithm}: P={cfg.P} n={cfg.n} k={cfg.k}; predicted words/rank "
          f"{pred.words[0]:g}..{pred.words[1]:g}, cost {lo:g}..{hi:g} s", file=sys.stderr)
    for name, passed in result.checks.items():
        print(f"  check {name}: {'ok' if passed else 'FAILED'}", file=sys.stderr)

    if cfg.out:
        emit_metrics(result.rows, cfg.out, cfg.fmt)
    elif cfg.fmt == "csv":
        sys.stdout.write(rows_to_csv(result.rows))
    else:
        for r in result.rows:
            sys.stdout.write(json.dumps({c: r[c] for c in COLUMNS}) + "\n")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
