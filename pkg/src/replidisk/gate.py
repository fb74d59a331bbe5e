"""Conflict gate: a FIFO of blocked operations and a set of invoked ones.

An operation is started immediately unless it overlaps an invoked operation
or anything still waiting in the queue.  When an invoked operation finishes,
the queue is released from the head for as long as the head does not
overlap what is still invoked.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable


@dataclass(eq=False)
class GateEntry:
    first: int
    count: int
    start: Callable[[], None] = field(repr=False)
    tag: object = None

    @property
    def blocks(self) -> range:
        return range(self.first, self.first + self.count)


class ConflictGate:
    def __init__(self) -> None:
        self.pending: deque[GateEntry] = deque()
        self.invoked: dict[int, GateEntry] = {}  # block -> entry covering it
        self.started: list[object] = []  # tags in start order, for inspection

    def __len__(self) -> int:
        return len(self.pending) + len({id(e) for e in self.invoked.values()})

    @property
    def idle(self) -> bool:
        return not self.pending and not self.invoked

    def _overlaps_invoked(self, entry: GateEntry) -> bool:
        return any(b in self.invoked for b in entry.blocks)

    def _overlaps_pending(self, entry: GateEntry) -> bool:
        for other in self.pending:
            if entry.first < other.first + other.count and other.first < entry.first + entry.count:
                return True
        return False

    def submit(self, first: int, start: Callable[[], None], count: int = 1, tag: object = None) -> GateEntry:
        if count < 1:
            raise ValueError("an operation covers at least one block")
        entry = GateEntry(first, count, start, tag)
        if self._overlaps_invoked(entry) or self._overlaps_pending(entry):
            self.pending.append(entry)
        else:
            self._invoke(entry)
        return entry

    def _invoke(self, entry: GateEntry) -> None:
        for b in entry.blocks:
            self.invoked[b] = entry
        self.started.append(entry.tag)
        entry.start()

    def complete(self, entry: GateEntry) -> None:
        for b in entry.blocks:
            if self.invoked.get(b) is not entry:
                raise KeyError(f"{entry} is not invoked")
            del self.invoked[b]
        while self.pending and not self._overlaps_invoked(self.pending[0]):
            self._invoke(self.pending.popleft())

    def clear(self) -> None:
        self.pending.clear()
        self.invoked.clear()
