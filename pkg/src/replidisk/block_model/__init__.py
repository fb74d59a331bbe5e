"""Executable block-device crash-consistency model."""

from .checker import (
    DEFAULT_BUDGET,
    Budget,
    DurableCut,
    SizeLimitExceeded,
    Verdict,
    check_crash_consistency,
    completions,
    durable_cuts,
    happens_before,
    is_crash_consistent,
    is_durable_cut,
    is_linearizable,
    is_sequential,
    linearize,
    project,
    reads_see_writes,
    truncate,
)
from .events import (
    Event,
    History,
    Kind,
    MalformedHistory,
    Op,
    PreconditionViolation,
    Sync,
    crash,
    operations,
    read_inv,
    read_res,
    write_inv,
    write_res,
)
from .tracefile import TraceParseError, format_trace, parse_trace, read_trace, write_trace

__all__ = [
    "DEFAULT_BUDGET",
    "Budget",
    "DurableCut",
    "Event",
    "History",
    "Kind",
    "MalformedHistory",
    "Op",
    "PreconditionViolation",
    "SizeLimitExceeded",
    "Sync",
    "TraceParseError",
    "Verdict",
    "check_crash_consistency",
    "completions",
    "crash",
    "durable_cuts",
    "format_trace",
    "happens_before",
    "is_crash_consistent",
    "is_durable_cut",
    "is_linearizable",
    "is_sequential",
    "linearize",
    "operations",
    "parse_trace",
    "project",
    "read_inv",
    "read_res",
    "read_trace",
    "reads_see_writes",
    "truncate",
    "write_inv",
    "write_res",
    "write_trace",
]
