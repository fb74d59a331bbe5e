"""Event vocabulary for block-device histories.

A history is a totally ordered sequence of invocations, responses and
crashes.  Everything the checker decides is expressed over these events;
page contents never appear, only opaque value identifiers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, NamedTuple, Sequence


class Kind(str, enum.Enum):
    WRITE_INV = "WI"
    WRITE_RES = "WR"
    READ_INV = "RI"
    READ_RES = "RR"
    CRASH = "CR"

    @property
    def is_invocation(self) -> bool:
        return self in (Kind.WRITE_INV, Kind.READ_INV)

    @property
    def is_response(self) -> bool:
        return self in (Kind.WRITE_RES, Kind.READ_RES)


class Sync(enum.IntFlag):
    NONE = 0
    FUA = 1
    PREFLUSH = 2

    @property
    def persistent(self) -> bool:
        return bool(self & (Sync.FUA | Sync.PREFLUSH))

    def code(self) -> str:
        text = ("F" if self & Sync.FUA else "") + ("P" if self & Sync.PREFLUSH else "")
        return text or "-"

    @classmethod
    def from_code(cls, text: str) -> "Sync":
        if text == "-":
            return cls.NONE
        if text not in ("F", "P", "FP"):
            raise ValueError(f"bad flag field {text!r}")
        flags = cls.NONE
        if "F" in text:
            flags |= cls.FUA
        if "P" in text:
            flags |= cls.PREFLUSH
        return flags


class MalformedHistory(ValueError):
    pass


class PreconditionViolation(ValueError):
    """A read targets a block that no earlier write invocation touched."""


@dataclass(frozen=True)
class Event:
    seq: int
    kind: Kind
    thread: str | None = None
    block: int | None = None
    value: str | None = None
    sync: Sync = Sync.NONE

    def __post_init__(self) -> None:
        if self.kind is Kind.CRASH:
            if self.thread is not None or self.block is not None or self.value is not None:
                raise MalformedHistory("a crash carries no thread, block or value")
            return
        if self.thread is None or self.block is None:
            raise MalformedHistory(f"{self.kind.value} needs a thread and a block")
        if self.kind in (Kind.WRITE_INV, Kind.READ_RES) and self.value is None:
            raise MalformedHistory(f"{self.kind.value} needs a value")
        if self.kind in (Kind.WRITE_RES, Kind.READ_INV) and self.value is not None:
            raise MalformedHistory(f"{self.kind.value} carries no value")
        if self.kind is not Kind.WRITE_INV and self.sync:
            raise MalformedHistory("only write invocations carry persistence flags")

    def __str__(self) -> str:
        if self.kind is Kind.CRASH:
            return "C"
        tag = {"WI": "W_inv", "WR": "W_res", "RI": "R_inv", "RR": "R_res"}[self.kind.value]
        args = [self.thread, f"b{self.block}"]
        if self.value is not None:
            args.append(self.value)
        if self.sync:
            args.append(self.sync.code())
        return f"{tag}({','.join(str(a) for a in args)})"


# Constructors. ``seq`` is assigned when the events are assembled into a History.

def write_inv(thread: str, block: int, value: str, sync: Sync = Sync.NONE) -> Event:
    return Event(-1, Kind.WRITE_INV, thread, block, value, Sync(sync))


def write_res(thread: str, block: int) -> Event:
    return Event(-1, Kind.WRITE_RES, thread, block)


def read_inv(thread: str, block: int) -> Event:
    return Event(-1, Kind.READ_INV, thread, block)


def read_res(thread: str, block: int, value: str) -> Event:
    return Event(-1, Kind.READ_RES, thread, block, value)


def crash() -> Event:
    return Event(-1, Kind.CRASH)


@dataclass(frozen=True)
class History(Sequence[Event]):
    """Immutable, densely numbered event sequence."""

    events: tuple[Event, ...] = field(default=())

    def __post_init__(self) -> None:
        crashes = 0
        for i, ev in enumerate(self.events):
            if ev.seq != i:
                raise MalformedHistory(f"event {i} has seq {ev.seq}; seq must be dense from 0")
            if ev.kind is Kind.CRASH:
                crashes += 1
        object.__setattr__(self, "_crashes", crashes)

    @classmethod
    def of(cls, *events: Event) -> "History":
        return cls.from_events(events)

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "History":
        return cls(tuple(ev if ev.seq == i else replace(ev, seq=i) for i, ev in enumerate(events)))

    def __len__(self) -> int:
        return len(self.events)

    def __getitem__(self, idx):  # type: ignore[override]
        if isinstance(idx, slice):
            return History.from_events(self.events[idx])
        return self.events[idx]

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __add__(self, other: "History") -> "History":
        return History.from_events(self.events + tuple(other.events))

    def thread(self, name: str) -> tuple[Event, ...]:
        """Per-thread subsequence."""
        return tuple(ev for ev in self.events if ev.thread == name)

    def threads(self) -> list[str]:
        seen: dict[str, None] = {}
        for ev in self.events:
            if ev.thread is not None:
                seen.setdefault(ev.thread)
        return list(seen)

    def eras(self) -> list["History"]:
        """Crash-free segments; a history with k crashes has k+1 eras."""
        out: list[list[Event]] = [[]]
        for ev in self.events:
            if ev.kind is Kind.CRASH:
                out.append([])
            else:
                out[-1].append(ev)
        return [History.from_events(seg) for seg in out]

    def blocks(self) -> set[int]:
        return {ev.block for ev in self.events if ev.block is not None}

    def has_crash(self) -> bool:
        return self._crashes > 0

    def __str__(self) -> str:
        return "[" + ", ".join(str(ev) for ev in self.events) + "]"


class Op(NamedTuple):
    """An invocation paired with its response (``res`` is None while pending).

    ``inv``/``res`` are positions in whatever coordinate system the caller
    uses; within one history they are event seqs.
    """

    id: int
    thread: str
    write: bool
    block: int
    value: str | None
    sync: Sync
    inv: int
    res: int | None
    era: int = 0

    @property
    def pending(self) -> bool:
        return self.res is None

    @property
    def flagged(self) -> bool:
        return self.write and int(self.sync) != 0

    @property
    def preflush(self) -> bool:
        return self.write and int(self.sync) & Sync.PREFLUSH.value != 0

    def __str__(self) -> str:
        if self.write:
            flags = "" if not self.sync else "," + self.sync.code()
            return f"W({self.thread},b{self.block}={self.value}{flags})"
        return f"R({self.thread},b{self.block}->{self.value})"


def matching(history: History) -> dict[int, int | None]:
    """Map each invocation seq to its response seq (None when pending).

    Validates per-thread well-formedness: within an era a thread alternates
    invocation and response, a response matches the outstanding invocation's
    block, and a pending invocation is its thread's last event in that era.
    """
    result: dict[int, int | None] = {}
    outstanding: dict[str, Event] = {}
    for ev in history:
        if ev.kind is Kind.CRASH:
            outstanding.clear()
            continue
        if ev.kind is Kind.WRITE_INV or ev.kind is Kind.READ_INV:
            if ev.thread in outstanding:
                raise MalformedHistory(
                    f"event {ev.seq}: thread {ev.thread} invokes while {outstanding[ev.thread]} is outstanding"
                )
            outstanding[ev.thread] = ev
            result[ev.seq] = None
            continue
        inv = outstanding.pop(ev.thread, None)
        if inv is None:
            raise MalformedHistory(f"event {ev.seq}: response without a matching invocation")
        if inv.block != ev.block or (inv.kind is Kind.WRITE_INV) != (ev.kind is Kind.WRITE_RES):
            raise MalformedHistory(f"event {ev.seq}: response does not match {inv}")
        result[inv.seq] = ev.seq
    return result


def operations(history: History) -> list[Op]:
    """Pair up invocations and responses, in invocation order."""
    pairs = matching(history)
    era = 0
    era_of: dict[int, int] = {}
    for ev in history:
        if ev.kind is Kind.CRASH:
            era += 1
        era_of[ev.seq] = era
    ops = []
    for inv_seq, res_seq in pairs.items():
        inv = history[inv_seq]
        is_write = inv.kind is Kind.WRITE_INV
        value = inv.value if is_write else (history[res_seq].value if res_seq is not None else None)
        ops.append(Op(inv_seq, inv.thread, is_write, inv.block, value, inv.sync, inv_seq, res_seq, era_of[inv_seq]))
    return ops


def check_reads_preceded_by_writes(history: History) -> None:
    """Raise PreconditionViolation when a block is read before any write to it."""
    written: set[int] = set()
    for ev in history:
        if ev.kind is Kind.WRITE_INV:
            written.add(ev.block)
        elif ev.kind is Kind.READ_INV and ev.block not in written:
            raise PreconditionViolation(f"event {ev.seq}: block {ev.block} read before any write")
