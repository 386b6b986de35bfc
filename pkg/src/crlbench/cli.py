"""Command-line entry points: run, report, inspect-memory."""
from __future__ import annotations

import argparse
import glob
import json
import sys
from typing import Optional, Sequence

from .experiment import ExperimentConfig, run_experiment
from .memory import ExemplarMemory
from .reporting import emit_report


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    ledger = run_experiment(config, resume=args.resume)
    print(f"run {ledger.run_id}: {ledger.completed_tasks}/{ledger.total_tasks} "
          f"tasks, status={ledger.status}")
    print(f"artifacts under {ledger.run_dir}")
    return 0


def _cmd_report(args) -> int:
    run_dirs = sorted(glob.glob(args.runs))
    written = emit_report(run_dirs, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_inspect_memory(args) -> int:
    memory = ExemplarMemory.from_manifest(args.manifest)
    info = {
        "policy": memory.policy,
        "capacity": memory.capacity,
        "per_class_quota": memory.per_class_quota,
        "seed": memory.seed,
        "stored": len(memory),
        "classes": len(memory.slots),
        "per_class_counts": {str(c): n for c, n in sorted(memory.class_counts().items())},
    }
    print(json.dumps(info, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crlbench",
        description="Continual-learning runs scored by output-layer retraining "
                    "and downstream transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment config")
    run.add_argument("--config", required=True, help="path to a JSON config")
    run.add_argument("--resume", action="store_true",
                     help="continue from the last committed task")
    run.set_defaults(func=_cmd_run)

    report = sub.add_parser("report", help="plots and tables from finished runs")
    report.add_argument("--runs", required=True,
                        help="glob of run directories, e.g. 'out/*'")
    report.add_argument("--out", required=True, help="directory for the report files")
    report.set_defaults(func=_cmd_report)

    inspect = sub.add_parser("inspect-memory", help="summarize a memory manifest")
    inspect.add_argument("--manifest", required=True)
    inspect.set_defaults(func=_cmd_inspect_memory)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
