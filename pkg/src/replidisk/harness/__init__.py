"""Simulation harness: workloads, fault schedules, campaigns and the CLI."""

from .cluster import EXIT_ABORTED, EXIT_BUDGET, EXIT_HALTED, EXIT_INCONSISTENT, EXIT_PASS, RunParams, RunResult, run
from .faults import Fault, ScheduleError, parse_schedule
from .workload import IoOp, generate

__all__ = [
    "EXIT_ABORTED",
    "EXIT_BUDGET",
    "EXIT_HALTED",
    "EXIT_INCONSISTENT",
    "EXIT_PASS",
    "Fault",
    "IoOp",
    "RunParams",
    "RunResult",
    "ScheduleError",
    "generate",
    "parse_schedule",
    "run",
]
