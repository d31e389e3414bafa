"""Command-line entry point: ``qvipenalty {table1,figure1,figure2,run}``.

Exit status is 0 when every sweep point converged, 2 when some solver
failure was recorded, and 1 for configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import sys

from . import bench

RUNNERS = {
    "table1": (bench.run_table1, bench.table1_config),
    "figure1": (bench.run_figure1, bench.figure1_config),
    "figure2": (bench.run_figure2, bench.figure2_config),
    "run": (bench.run_custom, None),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qvipenalty", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config" + (" (required)" if name == "run" else ""),
                       required=name == "run")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--tol", type=float, help="stopping tolerance")
        p.add_argument("--max-iter", type=int, help="policy-iteration cap")
        p.add_argument("--jobs", type=int, help="worker processes")
        p.add_argument("--seedless", action="store_true", help="fail if anything draws random numbers")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    runner, default = RUNNERS[args.command]
    try:
        cfg = bench.ExperimentConfig.from_json(args.config) if args.config else default()
        cfg = cfg.with_overrides(tol=args.tol, max_iter=args.max_iter, output_dir=args.out, jobs=args.jobs)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    guard = bench.seedless() if args.seedless else contextlib.nullcontext()
    with guard:
        result = runner(cfg, forbid_rng=args.seedless)
    for path in result.files[:2]:
        print(path)
    for p in result.failures:
        print(f"solver failure: n={p.n} scheme={p.scheme} rho={p.label} status={p.status}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
