"""Fault schedules: one ``AT_STEP ACTION ARGS`` entry per line.

``AT_STEP`` counts application trace events after the setup phase (which
writes every block once); the action fires as soon as that many have been
recorded. Rollbacks restore the latest snapshot of the machine, which by
default is the one taken when setup finishes. Supported actions::

    crash MACHINE
    snapshot MACHINE
    rollback MACHINE online|offline
    corrupt_page MACHINE BLOCK
    drop SRC DST [COUNT] [TYPE,...]
    dup SRC DST [COUNT] [TYPE,...]
    corrupt SRC DST [COUNT] [TYPE,...]
    hold SRC DST SECONDS [COUNT] [TYPE,...]
    delay SRC DST SECONDS

``hold`` postpones single messages (later traffic may overtake them);
``delay`` slows a whole link without reordering it. ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..transport import MsgType

MACHINE_ACTIONS = {"crash": 0, "snapshot": 0, "rollback": 1, "corrupt_page": 1}
LINK_ACTIONS = ("drop", "dup", "corrupt", "hold", "delay")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Fault:
    step: int
    action: str
    target: str
    peer: str = ""
    mode: str = ""
    block: int = 0
    seconds: float = 0.0
    count: int | None = 1
    types: frozenset[MsgType] | None = None

    def __str__(self) -> str:
        parts = [str(self.step), self.action, self.target]
        if self.action == "rollback":
            parts.append(self.mode)
        elif self.action == "corrupt_page":
            parts.append(str(self.block))
        elif self.action in LINK_ACTIONS:
            parts.append(self.peer)
            if self.action in ("hold", "delay"):
                parts.append(repr(self.seconds))
            if self.action != "delay":
                parts.append("*" if self.count is None else str(self.count))
                if self.types:
                    parts.append(",".join(sorted(t.name for t in self.types)))
        return " ".join(parts)


def _types(text: str, lineno: int) -> frozenset[MsgType]:
    try:
        return frozenset(MsgType[t.strip().upper()] for t in text.split(",") if t.strip())
    except KeyError as exc:
        raise ScheduleError(f"line {lineno}: unknown message type {exc.args[0]}") from None


def parse_line(line: str, lineno: int = 1) -> Fault | None:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    parts = line.split()
    if len(parts) < 3:
        raise ScheduleError(f"line {lineno}: expected AT_STEP ACTION ARGS")
    try:
        step = int(parts[0])
    except ValueError:
        raise ScheduleError(f"line {lineno}: step {parts[0]!r} is not an integer") from None
    if step < 0:
        raise ScheduleError(f"line {lineno}: negative step")
    action, args = parts[1], parts[2:]
    try:
        if action in MACHINE_ACTIONS:
            if len(args) != 1 + MACHINE_ACTIONS[action]:
                raise ScheduleError(f"line {lineno}: wrong number of arguments for {action}")
            if action == "rollback":
                if args[1] not in ("online", "offline"):
                    raise ScheduleError(f"line {lineno}: rollback mode must be online or offline")
                return Fault(step, action, args[0], mode=args[1])
            if action == "corrupt_page":
                return Fault(step, action, args[0], block=int(args[1]))
            return Fault(step, action, args[0])
        if action in LINK_ACTIONS:
            src, dst, rest = args[0], args[1], list(args[2:]) if len(args) >= 2 else []
            if len(args) < 2:
                raise ScheduleError(f"line {lineno}: {action} needs SRC DST")
            seconds = 0.0
            if action in ("hold", "delay"):
                if not rest:
                    raise ScheduleError(f"line {lineno}: {action} needs SECONDS")
                seconds = float(rest.pop(0))
            if action == "delay":
                if rest:
                    raise ScheduleError(f"line {lineno}: delay takes no count")
                return Fault(step, action, src, dst, seconds=seconds, count=None)
            count: int | None = 1
            types = None
            if rest:
                tok = rest.pop(0)
                count = None if tok == "*" else int(tok)
            if rest:
                types = _types(rest.pop(0), lineno)
            if rest:
                raise ScheduleError(f"line {lineno}: trailing arguments {rest}")
            return Fault(step, action, src, dst, seconds=seconds, count=count, types=types)
    except ValueError as exc:
        if isinstance(exc, ScheduleError):
            raise
        raise ScheduleError(f"line {lineno}: {exc}") from None
    raise ScheduleError(f"line {lineno}: unknown action {action!r}")


def parse_schedule(text: str) -> list[Fault]:
    faults = []
    for i, line in enumerate(text.splitlines(), 1):
        fault = parse_line(line, i)
        if fault is not None:
            faults.append(fault)
    return faults


def load_schedule(path: str | Path) -> list[Fault]:
    return parse_schedule(Path(path).read_text())


def format_schedule(faults: list[Fault]) -> str:
    return "".join(f"{f}\n" for f in faults)
