"""Command-line interface for running benchmark scenarios and emitting results."""

from __future__ import annotations

import argparse
import os
import sys
import time

from .errors import BalanceBenchError, ConfigError
from .harness import (
    WORKERS_ENV_VAR,
    config_from_mapping,
    emit_results,
    parse_config_text,
    run,
    summarize,
)
from .scenarios import CONFOUNDING_LEVELS, RARITY_LEVELS
from .weights import POSTPROCS


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="balancebench",
        description="Run covariate-balancing benchmark scenarios and write metric tables.",
    )
    p.add_argument("--config", metavar="PATH", help="key = value configuration file")
    p.add_argument("--grid", action=argparse.BooleanOptionalAction, default=None,
                   help="run all 36 benchmark scenarios")
    p.add_argument("--n", type=int, help="sample size for a single scenario")
    p.add_argument("--rarity", choices=RARITY_LEVELS)
    p.add_argument("--confounding", choices=CONFOUNDING_LEVELS)
    p.add_argument("--reps", type=int, help="replications per scenario")
    p.add_argument("--methods", help="comma-separated subset of iptw,eb,kom,tlf")
    p.add_argument("--learners", help="comma-separated subset of oracle,logistic_well,logistic_mis")
    p.add_argument("--estimators", help="comma-separated subset of WA,AWA,OLS")
    p.add_argument("--estimands", help="comma-separated subset of ATE,ATT")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", metavar="DIR", help="output directory (required)")
    p.add_argument("--postproc", choices=POSTPROCS, help="IPTW weight post-processing")
    p.add_argument("--workers", type=int, help=f"worker count (default: ${WORKERS_ENV_VAR} or 1)")
    p.add_argument("--emit-raw", action=argparse.BooleanOptionalAction, default=None,
                   help="also write per-replication records.ndjson")
    p.add_argument("--crude", action=argparse.BooleanOptionalAction, default=None,
                   help="also record the crude (unweighted) estimator per replication")
    p.add_argument("--dump-weights", action=argparse.BooleanOptionalAction, default=None,
                   help="debug: export weight vectors per replication")
    return p


def _cli_mapping(args: argparse.Namespace) -> dict:
    mapping = {}
    if args.grid is not None:
        mapping["grid"] = str(args.grid).lower()
    for key, value in (
        ("n", args.n), ("rarity", args.rarity), ("confounding", args.confounding),
        ("reps", args.reps), ("methods", args.methods), ("learners", args.learners),
        ("estimators", args.estimators), ("estimands", args.estimands),
        ("seed", args.seed), ("out", args.out), ("postproc", args.postproc),
        ("workers", args.workers),
    ):
        if value is not None:
            mapping[key] = str(value)
    for key, value in (("emit_raw", args.emit_raw), ("crude", args.crude),
                       ("dump_weights", args.dump_weights)):
        if value is not None:
            mapping[key] = str(value).lower()
    return mapping


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    try:
        mapping = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    mapping = parse_config_text(fh.read())
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from exc
        mapping.update(_cli_mapping(args))
        if "workers" not in mapping and os.environ.get(WORKERS_ENV_VAR):
            mapping["workers"] = os.environ[WORKERS_ENV_VAR]
        if "out" not in mapping or not mapping["out"]:
            raise ConfigError("an output directory is required (--out DIR)")
        config = config_from_mapping(mapping)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    total = len(config.scenarios)

    def progress(i, scenario, seconds):
        n, rarity, confounding = scenario
        print(
            f"[{i + 1}/{total}] n={n} {rarity}/{confounding}: "
            f"{config.replications} replications in {seconds:.1f}s",
            file=sys.stderr,
        )

    t0 = time.perf_counter()
    try:
        records = run(config, progress=progress)
        summaries = summarize(records)
        paths = emit_results(summaries, records, config, wall_time=time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BalanceBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {paths['summary']}", file=sys.stderr)
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
