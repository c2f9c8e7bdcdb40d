"""Command-line entry point.

    sttmpc run --config cfg.yaml [--jobs N] [--set key=value ...] [--out dir]
    sttmpc table --in dir
    sttmpc plot --in dir

Exit codes: 0 success, 2 configuration error, 3 contract violation during
a run, 4 initial infeasibility. The default output root comes from the
STTMPC_OUT_ROOT environment variable (fallback: ./runs).
"""

from __future__ import annotations

import argparse
import sys

from .experiment import (ConfigError, aggregate_volumes, collect_traces,
                         emit_plots, run_experiment)
from .simulation import ContractViolation, InitialInfeasible


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sttmpc",
        description="Self-tuning tube MPC: closed-loop experiment runner.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run the (delta, seed) grid from a "
                                       "config file and write artifacts")
    p_run.add_argument("--config", required=True, help="YAML config path")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="worker processes for the grid (default 1)")
    p_run.add_argument("--set", action="append", default=[],
                       dest="overrides", metavar="KEY=VALUE",
                       help="override a config field, e.g. run.steps=5")
    p_run.add_argument("--out", default=None,
                       help="artifact directory (default: config output_dir "
                            "or $STTMPC_OUT_ROOT/exp-<hash>)")

    p_table = sub.add_parser("table", help="rebuild the volume table from "
                                           "trace CSVs in a directory")
    p_table.add_argument("--in", dest="in_dir", required=True)

    p_plot = sub.add_parser("plot", help="rebuild the SVG figures from "
                                         "artifacts in a directory")
    p_plot.add_argument("--in", dest="in_dir", required=True)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "run":
            out_dir = run_experiment(args.config, overrides=args.overrides,
                                     jobs=args.jobs, out=args.out)
            print(f"artifacts: {out_dir}")
            print((out_dir / "table.txt").read_text(), end="")
        elif args.cmd == "table":
            groups = collect_traces(args.in_dir)
            if not groups:
                print(f"no traces under {args.in_dir}", file=sys.stderr)
                return 2
            table = aggregate_volumes(groups)
            from pathlib import Path
            Path(args.in_dir, "table.csv").write_text(table.to_csv_text())
            Path(args.in_dir, "table.txt").write_text(table.to_text())
            print(table.to_text(), end="")
        elif args.cmd == "plot":
            written = emit_plots(args.in_dir)
            for path in written:
                print(f"wrote {path}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ContractViolation as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 3
    except InitialInfeasible as e:
        print(f"initial problem infeasible: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
