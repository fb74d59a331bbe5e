"""Command line: ``run`` a simulated deployment, ``check`` a trace, ``fuzz`` campaigns."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..block_model import Budget, SizeLimitExceeded, check_crash_consistency, format_trace
from ..block_model.checker import DEFAULT_BUDGET
from ..block_model.events import MalformedHistory, PreconditionViolation
from ..block_model.tracefile import TraceParseError, read_trace
from ..node import MUTANTS
from ..transport import ConfigError
from .campaigns import ace_campaign, fuzz_campaign
from .cluster import EXIT_BUDGET, EXIT_INCONSISTENT, EXIT_PASS, RunParams, run
from .faults import ScheduleError, load_schedule
from .workload import SHAPES, file_ops_preset

EXIT_USAGE = 64


def _run_header(p: RunParams) -> str:
    return (
        f"replidisk run nodes={p.nodes} f={p.f} layers={p.layers} blocks={p.blocks} "
        f"block_size={p.block_size} threads={p.threads} ops={p.ops} fsync_every={p.fsync_every} "
        f"workload={p.workload} seed={p.seed} faults={len(p.faults)}"
    )


def _emit(lines: list[str], report: str | None) -> None:
    text = "".join(line + "\n" for line in lines)
    sys.stdout.write(text)
    if report:
        Path(report).write_text(text)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        faults = load_schedule(args.faults) if args.faults else []
    except (OSError, ScheduleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    params = RunParams(
        nodes=args.nodes,
        f=args.f,
        layers=args.merkle_disk_layers,
        blocks=args.blocks,
        block_size=args.block_size,
        threads=args.threads,
        ops=args.ops,
        fsync_every=args.fsync_every,
        workload=args.workload,
        seed=args.seed,
        faults=faults,
        mutants=frozenset(args.mutant or ()),
    )
    if args.preset == "file-ops":
        params.program = [file_ops_preset(args.blocks, args.ops, block_size=args.block_size)
                          for _ in range(args.threads)]
    try:
        res = run(params)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.trace_out:
        Path(args.trace_out).write_text(format_trace(res.history, _run_header(params)), encoding="ascii")
    _emit(res.report_lines(), args.report)
    return res.exit_code


def cmd_check(args: argparse.Namespace) -> int:
    try:
        history = read_trace(args.trace)
    except TraceParseError as exc:
        print(f"{args.trace}:{exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        verdict = check_crash_consistency(history, Budget(args.budget))
    except SizeLimitExceeded as exc:
        print(f"BUDGET-EXCEEDED: {exc}")
        return EXIT_BUDGET
    except (MalformedHistory, PreconditionViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(verdict.narrative())
    return EXIT_PASS if verdict.consistent else EXIT_INCONSISTENT


def cmd_fuzz(args: argparse.Namespace) -> int:
    if args.systematic:
        summary = ace_campaign(args.max_template, args.seed)
    else:
        summary = fuzz_campaign(args.schedules, args.seed, frozenset(args.mutant or ()), args.merkle_disk_layers)
    _emit(summary.lines(), args.report)
    return EXIT_PASS if not summary.failures else EXIT_INCONSISTENT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replidisk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a deployment under a fault schedule and check its trace")
    r.add_argument("--nodes", type=int, default=2)
    r.add_argument("--f", type=int, default=1)
    r.add_argument("--merkle-disk-layers", type=int, default=0, choices=(0, 1, 2))
    r.add_argument("--blocks", type=int, default=64)
    r.add_argument("--block-size", type=int, default=4096)
    r.add_argument("--threads", type=int, default=3)
    r.add_argument("--ops", type=int, default=10)
    r.add_argument("--fsync-every", type=int, default=0)
    r.add_argument("--workload", choices=SHAPES, default="rand")
    r.add_argument("--preset", choices=("file-ops",), help="replace the workload with a file-operation preset")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--faults", metavar="FILE")
    r.add_argument("--trace-out", metavar="FILE")
    r.add_argument("--report", metavar="FILE")
    r.add_argument("--mutant", action="append", choices=MUTANTS)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="judge a recorded trace")
    c.add_argument("trace")
    c.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    c.set_defaults(func=cmd_check)

    z = sub.add_parser("fuzz", help="seeded fault campaigns")
    z.add_argument("--schedules", type=int, default=500)
    z.add_argument("--seed", type=int, default=0)
    z.add_argument("--mutant", action="append", choices=MUTANTS)
    z.add_argument("--merkle-disk-layers", type=int, choices=(0, 1), default=None)
    z.add_argument("--systematic", action="store_true", help="every crash point of every small template")
    z.add_argument("--max-template", type=int, default=4)
    z.add_argument("--report", metavar="FILE")
    z.set_defaults(func=cmd_fuzz)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
