"""Line-oriented trace format.

One event per line, six space-separated fields::

    SEQ THREAD KIND BLOCK VALUE FLAGS

``-`` marks an absent field.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from pathlib import Path

from .events import Event, History, Kind, MalformedHistory, Sync


class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def format_event(ev: Event) -> str:
    def field(x: object) -> str:
        return "-" if x is None else str(x)

    flags = ev.sync.code() if ev.kind is Kind.WRITE_INV else "-"
    return " ".join([str(ev.seq), field(ev.thread), ev.kind.value, field(ev.block), field(ev.value), flags])


def format_trace(h: History, header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend("# " + line for line in header.splitlines())
    lines.extend(format_event(ev) for ev in h)
    return "".join(line + "\n" for line in lines)


def parse_trace(text: str) -> History:
    events: list[Event] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split(" ")
        if len(parts) != 6:
            raise TraceParseError(lineno, f"expected 6 fields, got {len(parts)}")
        seq_s, thread, kind_s, block_s, value, flags = parts
        try:
            seq = int(seq_s)
            kind = Kind(kind_s)
            block = None if block_s == "-" else int(block_s)
            sync = Sync.from_code(flags)
        except ValueError as exc:
            raise TraceParseError(lineno, str(exc)) from None
        if seq != len(events):
            raise TraceParseError(lineno, f"seq {seq} out of order (expected {len(events)})")
        if kind is not Kind.WRITE_INV and flags != "-":
            raise TraceParseError(lineno, "flags only allowed on WI")
        try:
            events.append(Event(
                seq,
                kind,
                None if thread == "-" else thread,
                block,
                None if value == "-" else value,
                sync,
            ))
        except MalformedHistory as exc:
            raise TraceParseError(lineno, str(exc)) from None
    return History(tuple(events))


def read_trace(path: str | Path) -> History:
    return parse_trace(Path(path).read_text(encoding="ascii"))


def write_trace(path: str | Path, h: History, header: str | None = None) -> None:
    Path(path).write_text(format_trace(h, header), encoding="ascii")
