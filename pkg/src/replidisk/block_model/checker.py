"""Decision procedures for linearizability and block-device crash consistency.

The search works on :class:`Op` records rather than raw events.  Within a
crash-free history every happens-before edge runs from a response to a later
invocation, so ordering constraints between operations reduce to "A's
response precedes B's invocation and they share a block, or B is a
PREFLUSH write".  Positions of concatenated durable cuts are kept
era-major so that comparison across eras stays a plain integer compare.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .events import (
    Event,
    History,
    Kind,
    MalformedHistory,
    Op,
    PreconditionViolation,
    Sync,
    matching,
)

DEFAULT_BUDGET = 10**7

# Era stride for era-major positions; histories are far shorter than this.
_STRIDE = 1 << 32


class SizeLimitExceeded(RuntimeError):
    """The search outgrew its state budget. Not a verdict."""


class Budget:
    def __init__(self, limit: int = DEFAULT_BUDGET):
        self.limit = limit
        self.used = 0

    def tick(self, n: int = 1) -> None:
        self.used += n
        if self.used > self.limit:
            raise SizeLimitExceeded(f"explored more than {self.limit} states")


# ---------------------------------------------------------------------------
# Predicates over raw histories


def happens_before(h: History, a: Event, b: Event) -> bool:
    """Strict happens-before between two events of ``h``.

    Chains of length two or more can only pass through a crash: an
    invocation has no outgoing edge except into a crash, and a response
    has no incoming edge except from one.
    """
    if h[a.seq] != a or h[b.seq] != b:
        raise ValueError("events must belong to the history")
    if a.seq >= b.seq:
        return False
    if a.kind is Kind.CRASH or b.kind is Kind.CRASH:
        return True
    if any(ev.kind is Kind.CRASH for ev in h.events[a.seq + 1 : b.seq]):
        return True
    if not a.kind.is_response or not b.kind.is_invocation:
        return False
    if a.block == b.block:
        return True
    return b.kind is Kind.WRITE_INV and bool(b.sync & Sync.PREFLUSH)


def is_sequential(h: History) -> bool:
    pairs = matching(h)
    for inv_seq, res_seq in pairs.items():
        if res_seq is not None and res_seq != inv_seq + 1:
            return False
    return True


def reads_see_writes(h: History) -> bool:
    pairs = matching(h)
    res_to_inv = {r: i for i, r in pairs.items() if r is not None}
    for ev in h:
        if ev.kind is not Kind.READ_RES:
            continue
        r_inv = res_to_inv[ev.seq]
        if not _read_justified(h, pairs, ev, r_inv):
            return False
    return True


def _read_justified(h: History, pairs: dict[int, int | None], rres: Event, r_inv: int) -> bool:
    # Walk back from the read response: the only write invocation to the block
    # allowed in the window is the justifying one, and no crash may intervene.
    for pos in range(rres.seq - 1, -1, -1):
        ev = h[pos]
        if ev.kind is Kind.CRASH:
            return False
        if ev.kind is Kind.WRITE_INV and ev.block == rres.block:
            w_res = pairs.get(ev.seq)
            return ev.value == rres.value and w_res is not None and w_res < r_inv
    return False


def truncate(h: History) -> History:
    """Drop every invocation that has no matching response."""
    pairs = matching(h)
    pending = {inv for inv, res in pairs.items() if res is None}
    return History.from_events(ev for ev in h if ev.seq not in pending)


def completions(h: History) -> list[History]:
    """All ways to complete pending writes.

    Each completion response is placed at the end of the era holding its
    invocation, ahead of the next crash.  Pending reads are left pending:
    they return no value the history could be judged on, and ``truncate``
    removes them.
    """
    pairs = matching(h)
    pending = [h[i] for i, r in pairs.items() if r is None and h[i].kind is Kind.WRITE_INV]
    out = []
    for k in range(len(pending) + 1):
        for chosen in itertools.combinations(pending, k):
            out.append(_complete(h, chosen))
    return out


def _complete(h: History, chosen: Sequence[Event]) -> History:
    by_era: dict[int, list[Event]] = {}
    era = 0
    era_of = {}
    for ev in h:
        if ev.kind is Kind.CRASH:
            era += 1
        era_of[ev.seq] = era
    for inv in sorted(chosen, key=lambda e: e.seq):
        by_era.setdefault(era_of[inv.seq], []).append(
            Event(-1, Kind.WRITE_RES, inv.thread, inv.block)
        )
    events: list[Event] = []
    era = 0
    for ev in h:
        if ev.kind is Kind.CRASH:
            events.extend(by_era.get(era, []))
            era += 1
        events.append(ev)
    events.extend(by_era.get(era, []))
    return History.from_events(events)


# ---------------------------------------------------------------------------
# Linearization search


def _preds(ops: Sequence[Op]) -> list[int]:
    """For each op, a bitmask of the ops that must precede it in any witness."""
    done = [(j, o.res, o.block) for j, o in enumerate(ops) if o.res is not None]
    out = []
    for b in ops:
        mask = 0
        inv = b.inv
        if b.write and int(b.sync) & _PREFLUSH:
            for j, res, _ in done:
                if res < inv:
                    mask |= 1 << j
        else:
            block = b.block
            for j, res, blk in done:
                if res < inv and blk == block:
                    mask |= 1 << j
        out.append(mask)
    return out


_PREFLUSH = int(Sync.PREFLUSH)
_new = tuple.__new__


def _linearize(ops: Sequence[Op], budget: Budget) -> list[Op] | None:
    """Find a sequential order of ``ops`` respecting reads-see-writes.

    ``ops`` must be sorted by invocation position.  Completed ops must all
    be placed; pending writes may be placed or dropped (completion vs
    truncation); pending reads are ignored.  Returns the order, or None.
    """
    live = []
    reads = False
    for o in ops:
        if o.write:
            live.append(o)
        elif o.res is not None:
            live.append(o)
            reads = True
    if not reads:
        # No value constraints: invocation order respects every edge.
        return [o for o in live if o.res is not None]
    ops = live
    lanes_by_thread: dict[str, list[int]] = {}
    required = 0
    blocks: dict[int, int] = {}
    slot = []
    for idx, op in enumerate(ops):
        lanes_by_thread.setdefault(op.thread, []).append(idx)
        if op.res is not None:
            required |= 1 << idx
        slot.append(blocks.setdefault(op.block, len(blocks)))
    lanes = list(lanes_by_thread.values())
    preds = _preds(ops)
    failed: set[tuple] = set()
    order: list[int] = []
    pos = [0] * len(lanes)
    nlanes = range(len(lanes))

    def dfs(done: int, vals: tuple) -> bool:
        if done & required == required:
            return True
        key = (done, vals)
        if key in failed:
            return False
        budget.tick()
        for li in nlanes:
            lane = lanes[li]
            p = pos[li]
            if p == len(lane):
                continue
            idx = lane[p]
            if preds[idx] & done != preds[idx]:
                continue
            op = ops[idx]
            k = slot[idx]
            if op.write:
                nvals = vals[:k] + (op.value,) + vals[k + 1 :]
            elif vals[k] != op.value:
                continue
            else:
                nvals = vals
            pos[li] = p + 1
            order.append(idx)
            if dfs(done | 1 << idx, nvals):
                return True
            order.pop()
            pos[li] = p
        failed.add(key)
        return False

    try:
        if dfs(0, (None,) * len(blocks)):
            return [ops[i] for i in order]
        return None
    finally:
        dfs = None  # break the closure's self-reference so no cycle outlives the call


def _witness_history(order: Sequence[Op]) -> History:
    events = []
    for op in order:
        if op.write:
            events.append(Event(-1, Kind.WRITE_INV, op.thread, op.block, op.value, op.sync))
            events.append(Event(-1, Kind.WRITE_RES, op.thread, op.block))
        else:
            events.append(Event(-1, Kind.READ_INV, op.thread, op.block))
            events.append(Event(-1, Kind.READ_RES, op.thread, op.block, op.value))
    return History.from_events(events)


def linearize(h: History, budget: Budget | None = None) -> History | None:
    """Sequential witness for a crash-free history, or None if there is none."""
    if h.has_crash():
        raise ValueError("linearize expects a crash-free history; use is_crash_consistent")
    (ops,), _ = _era_ops(h)
    order = _linearize(ops, budget or Budget())
    return None if order is None else _witness_history(order)


def is_linearizable(h: History, budget: Budget | None = None) -> bool:
    if h.has_crash():
        raise ValueError("is_linearizable expects a crash-free history; use is_crash_consistent")
    (ops,), _ = _era_ops(h)
    return _linearize(ops, budget or Budget()) is not None


# ---------------------------------------------------------------------------
# Durable cuts


@dataclass(frozen=True)
class DurableCut:
    """A durable cut of one era.

    ``kept`` holds the ids (invocation seqs in the era) of kept operations,
    ``completed`` the subset that were pending and got completed.
    """

    kept: frozenset[int]
    completed: frozenset[int]
    ops: tuple[Op, ...] = field(compare=False, repr=False)

    def history(self) -> History:
        """The cut as an order-preserving subhistory of the completed era."""
        stamped = []
        for op in self.ops:
            stamped.append((op.inv, Event(-1, Kind.WRITE_INV if op.write else Kind.READ_INV,
                                          op.thread, op.block, op.value if op.write else None, op.sync)))
            if op.write:
                stamped.append((op.res, Event(-1, Kind.WRITE_RES, op.thread, op.block)))
            else:
                stamped.append((op.res, Event(-1, Kind.READ_RES, op.thread, op.block, op.value)))
        stamped.sort(key=lambda p: p[0])
        return History.from_events(ev for _, ev in stamped)


def _closure(ops: Sequence[Op]) -> list[int]:
    """Transitive predecessor bitmasks, by index into ``ops`` (sorted by inv)."""
    preds = _preds(ops)
    anc: list[int] = []
    for i in range(len(ops)):
        acc = preds[i]
        for j in range(i):
            if preds[i] >> j & 1:
                acc |= anc[j]
        anc.append(acc)
    return anc


# Eras with at most this many writes have their cuts enumerated eagerly.
_EAGER_WRITES = 8


def _cut_masks(era_ops: Sequence[Op], budget: Budget, forced: int = 0, excluded: int = 0) -> Iterator[int]:
    """Enumerate durable cuts of one era as index masks of kept ops, largest-first.

    ``era_ops`` must be sorted by invocation position.  Reads are kept only
    when some kept op forces them by closure.  ``forced`` and ``excluded``
    are index masks of ops that every cut must keep or drop, for callers
    that fix part of the choice from outside.
    """
    ops = era_ops
    anc = _closure(ops)  # pending ops have no response, so never appear as predecessors
    writes = [i for i, o in enumerate(ops) if o.write]
    write_mask = sum(1 << i for i in writes)
    required = 0
    base = forced
    for i, o in enumerate(ops):
        if forced >> i & 1:
            base |= anc[i]
            required |= 1 << i if o.write else 0
            required |= anc[i] & write_mask
        elif o.write and o.flagged and not o.pending:
            required |= 1 << i | (anc[i] & write_mask)
    if required & excluded:
        return
    nwrites = len(writes)
    if nwrites <= _EAGER_WRITES:
        # Breadth-first expansion yields the same order as the lazy recursion.
        masks = [base]
        for i in writes:
            need = anc[i] & write_mask
            take = not excluded >> i & 1
            skip = not required >> i & 1
            grown = []
            for keep in masks:
                if take and need & keep == need:
                    grown.append(keep | 1 << i | anc[i])
                if skip:
                    grown.append(keep)
            budget.tick(len(grown))
            masks = grown
        yield from masks
        return

    def rec(k: int, keep: int) -> Iterator[int]:
        budget.tick()
        if k == nwrites:
            yield keep
            return
        i = writes[k]
        need = anc[i] & write_mask
        if need & keep == need and not excluded >> i & 1:
            yield from rec(k + 1, keep | 1 << i | anc[i])
        if not required >> i & 1:
            yield from rec(k + 1, keep)

    try:
        yield from rec(0, base)
    finally:
        rec = None  # see _linearize


def _kept_ops(era_ops: Sequence[Op], keep: int, end: int) -> list[Op]:
    """Ops of a cut, with pending writes completed at positions after ``end``."""
    out = []
    completed = 0
    for i, o in enumerate(era_ops):
        if keep >> i & 1:
            if o.res is None:
                completed += 1
                o = _new(Op, (*o[:7], end + completed, o[8]))
            out.append(o)
    return out


def _make_cut(era_ops: Sequence[Op], kept: list[Op]) -> DurableCut:
    pending = {o.id for o in era_ops if o.res is None}
    return DurableCut(frozenset(o.id for o in kept), frozenset(o.id for o in kept if o.id in pending), tuple(kept))


def _iter_cuts(
    era_ops: Sequence[Op], end: int, budget: Budget, forced: int = 0, excluded: int = 0
) -> Iterator[DurableCut]:
    """Durable cuts of one era, largest-first; ``end`` places completion responses."""
    for keep in _cut_masks(era_ops, budget, forced, excluded):
        yield _make_cut(era_ops, _kept_ops(era_ops, keep, end))


# Last history parsed and its result, swapped as one tuple so concurrent
# callers never see a mismatched pair. Histories are immutable.
_parsed: tuple = (None, None)


def _era_ops(h: History) -> tuple[list[list[Op]], list[int]]:
    """Operations per era with era-major positions, plus each era's end position.

    One pass that also enforces per-thread well-formedness and the
    written-before-read precondition.
    """
    global _parsed
    last_h, last = _parsed
    if last_h is h:
        return last
    result = _parse_eras(h)
    _parsed = (h, result)
    return result


def _parse_eras(h: History) -> tuple[list[list[Op]], list[int]]:
    eras: list[list[Op]] = []
    ends: list[int] = []
    cur: list[list] = []  # Op fields, filled in as responses arrive
    outstanding: dict[str, list] = {}
    written: set[int] = set()
    shift = 0
    era = 0
    new = tuple.__new__
    CRASH, WRITE_INV, READ_INV, WRITE_RES = Kind.CRASH, Kind.WRITE_INV, Kind.READ_INV, Kind.WRITE_RES
    for ev in h.events:
        kind = ev.kind
        seq = ev.seq
        if kind is CRASH:
            eras.append([new(Op, r) for r in cur])
            ends.append(seq + shift)
            cur = []
            outstanding.clear()
            era += 1
            shift = era * _STRIDE - seq - 1
            continue
        if kind is WRITE_INV or kind is READ_INV:
            t = ev.thread
            if t in outstanding:
                raise MalformedHistory(f"event {seq}: thread {t} invokes while an op is outstanding")
            b = ev.block
            if kind is WRITE_INV:
                written.add(b)
                r = [seq, t, True, b, ev.value, ev.sync, seq + shift, None, era]
            elif b not in written:
                raise PreconditionViolation(f"event {seq}: block {b} read before any write")
            else:
                r = [seq, t, False, b, None, ev.sync, seq + shift, None, era]
            cur.append(r)
            outstanding[t] = r
            continue
        r = outstanding.pop(ev.thread, None)
        if r is None:
            raise MalformedHistory(f"event {seq}: response without a matching invocation")
        if r[3] != ev.block or r[2] != (kind is WRITE_RES):
            raise MalformedHistory(f"event {seq}: response does not match the invocation at {r[0]}")
        r[7] = seq + shift
        if not r[2]:
            r[4] = ev.value
    eras.append([new(Op, r) for r in cur])
    ends.append(len(h.events) + shift)
    return eras, ends


def durable_cuts(era: History, budget: Budget | None = None) -> list[DurableCut]:
    if era.has_crash():
        raise ValueError("durable_cuts expects a single crash-free era")
    (ops,), (end,) = _era_ops(era)
    return list(_iter_cuts(ops, end, budget or Budget()))


def is_durable_cut(era: History, kept_writes: set[int]) -> bool:
    """Is there a durable cut of ``era`` whose kept writes are exactly ``kept_writes``?

    ``kept_writes`` are invocation seqs of write ops; reads are implied.
    """
    (ops,), _ = _era_ops(era)
    idx = {o.id: i for i, o in enumerate(ops)}
    if not kept_writes <= {o.id for o in ops if o.write}:
        return False
    anc = _closure(ops)
    for o in ops:
        if o.flagged and not o.pending and o.id not in kept_writes:
            return False
    for wid in kept_writes:
        mask = anc[idx[wid]]
        for j, o in enumerate(ops):
            if mask >> j & 1 and o.write and o.id not in kept_writes:
                return False
    return True


# ---------------------------------------------------------------------------
# Crash consistency


@dataclass
class Verdict:
    consistent: bool
    cuts: list[DurableCut] = field(default_factory=list)
    order: list[Op] | None = field(default=None, repr=False)
    failed_era: int | None = None
    explored: int = 0
    obligations: list[Op] = field(default_factory=list)
    failed_block: int | None = None
    method: str = "direct"
    _last_era: list[Op] = field(default_factory=list, repr=False)

    @property
    def witness(self) -> History | None:
        """Sequential history of the last era over its durable-cut prefix."""
        if not self.consistent:
            return None
        if self.order is None:
            prefix = [o for cut in self.cuts for o in cut.ops]
            self.order = _linearize(sorted(prefix + self._last_era, key=lambda o: o.inv), Budget(1 << 62))
        return _witness_history(self.order)

    def __bool__(self) -> bool:
        return self.consistent

    def narrative(self) -> str:
        if self.consistent:
            return "CONSISTENT"
        lines = [f"INCONSISTENT: era {self.failed_era} is not linearizable"]
        if self.failed_era:
            lines[0] += f" on top of any durable cut of eras 0..{self.failed_era - 1}"
        if self.failed_block is not None:
            lines[0] += f" (block {self.failed_block})"
        if self.obligations:
            lines.append("  every cut must keep: " + ", ".join(str(o) for o in self.obligations))
        return "\n".join(lines)


def _search(eras, era_end, budget, forced=None, excluded=None):
    """Era-by-era search for durable cuts; returns ((cuts, order) or None, deepest era)."""
    n = len(eras)
    forced = forced or [0] * n
    excluded = excluded or [0] * n
    deepest = 0
    # An era reading a value that no write up to and including it produced
    # fails on top of every cut; one failed attempt then settles it.
    hopeless = []
    written: set = set()
    for ops in eras:
        written.update((o.block, o.value) for o in ops if o.write)
        hopeless.append(any(not o.write and o.res is not None and (o.block, o.value) not in written for o in ops))

    def rec(i: int, prefix: list[Op]):
        nonlocal deepest
        if i > deepest:
            deepest = i
        order = _linearize(prefix + eras[i], budget)
        if order is None:
            return None
        if i == n - 1:
            return [], order
        ops = eras[i]
        for keep in _cut_masks(ops, budget, forced[i], excluded[i]):
            kept = _kept_ops(ops, keep, era_end[i])
            found = rec(i + 1, prefix + kept)
            if found is not None:
                return [_make_cut(ops, kept)] + found[0], found[1]
            if hopeless[i + 1]:
                break
        return None

    try:
        return rec(0, []), deepest
    finally:
        rec = None  # see _linearize


def _obligations(eras, failed: int) -> list[Op]:
    out = []
    for era in eras[:failed]:
        out.extend(o for o in era if o.flagged and not o.pending)
    return out


def _check_direct(eras, era_end, budget) -> Verdict:
    found, deepest = _search(eras, era_end, budget)
    if found is not None:
        cuts, order = found
        return Verdict(True, cuts, order, explored=budget.used)
    return Verdict(False, failed_era=deepest, explored=budget.used, obligations=_obligations(eras, deepest))


def _subsets(mask: int) -> Iterator[int]:
    """All submasks of ``mask``, largest first."""
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def _check_factored(eras, era_end, budget) -> Verdict:
    """Same question, answered block by block.

    Linearizability is local: a history is linearizable iff each block's
    projection is, because every ordering constraint the witness must
    respect is part of real-time order. Durable-cut closure couples blocks
    only through PREFLUSH writes. Completed ones are kept anyway, so the
    only cross-block choice is which pending PREFLUSH writes each cut
    completes. For each such choice the blocks are searched independently.
    """
    last = len(eras) - 1
    anc = [_closure(ops) for ops in eras]
    base = []
    pending_pf = []
    for e, ops in enumerate(eras):
        req = pend = 0
        for i, o in enumerate(ops):
            if o.flagged and not o.pending:
                req |= 1 << i | anc[e][i]
            elif o.write and o.pending and o.preflush:
                pend |= 1 << i
        base.append(req)
        pending_pf.append(pend if e < last else 0)

    blocks = sorted({o.block for ops in eras for o in ops})
    split = {}
    for b in blocks:
        sub_eras, maps = [], []
        for ops in eras:
            idx = [i for i, o in enumerate(ops) if o.block == b]
            sub_eras.append([ops[i] for i in idx])
            maps.append(idx)
        split[b] = (sub_eras, maps)

    def local(mask: int, idx: list[int]) -> int:
        out = 0
        for k, i in enumerate(idx):
            if mask >> i & 1:
                out |= 1 << k
        return out

    failure = (0, None)
    for combo in itertools.product(*[list(_subsets(m)) for m in pending_pf]):
        forced_g, excluded_g = [], []
        for e, chosen in enumerate(combo):
            f = base[e]
            for i in range(len(eras[e])):
                if chosen >> i & 1:
                    f |= 1 << i | anc[e][i]
            forced_g.append(f)
            excluded_g.append(pending_pf[e] & ~chosen)
        cuts_by_era: list[list[DurableCut]] = [[] for _ in range(last)]
        ok = True
        for b in blocks:
            sub_eras, maps = split[b]
            forced = [local(forced_g[e], maps[e]) for e in range(len(eras))]
            excluded = [local(excluded_g[e], maps[e]) for e in range(len(eras))]
            found, deepest = _search(sub_eras, era_end, budget, forced, excluded)
            if found is None:
                if deepest >= failure[0]:
                    failure = (deepest, b)
                ok = False
                break
            for e, cut in enumerate(found[0]):
                cuts_by_era[e].append(cut)
        if ok:
            cuts = []
            for e, parts in enumerate(cuts_by_era):
                ops = sorted((o for c in parts for o in c.ops), key=lambda o: o.inv)
                cuts.append(DurableCut(frozenset().union(*(c.kept for c in parts)),
                                       frozenset().union(*(c.completed for c in parts)), tuple(ops)))
            return Verdict(True, cuts, None, explored=budget.used, method="factored", _last_era=list(eras[last]))
    deepest, b = failure
    return Verdict(False, failed_era=deepest, explored=budget.used, obligations=_obligations(eras, deepest),
                   failed_block=b, method="factored")


# Histories longer than this many operations are checked block by block.
FACTOR_THRESHOLD = 12


def check_crash_consistency(h: History, budget: Budget | None = None, method: str = "auto") -> Verdict:
    """Search for per-era durable cuts that keep every era linearizable.

    ``method`` is ``direct`` (one joint search), ``factored`` (per block,
    exact as well, far cheaper on long multi-block histories) or ``auto``.
    """
    budget = budget or Budget()
    eras, era_end = _era_ops(h)
    if method == "auto":
        method = "factored" if sum(map(len, eras)) > FACTOR_THRESHOLD else "direct"
    if method == "direct":
        return _check_direct(eras, era_end, budget)
    if method == "factored":
        return _check_factored(eras, era_end, budget)
    raise ValueError(f"unknown method {method!r}")


def is_crash_consistent(h: History, budget: Budget | None = None, method: str = "auto") -> bool:
    if method == "direct" or method == "auto":
        eras, era_end = _era_ops(h)
        if method == "direct" or sum(map(len, eras)) <= FACTOR_THRESHOLD:
            return _search(eras, era_end, budget or Budget())[0] is not None
    return check_crash_consistency(h, budget, method).consistent


def project(h: History, blocks: set[int]) -> History:
    """Restrict a history to events on ``blocks`` (crashes kept).

    Dropping operations only removes constraints, so a projection of a
    consistent history is consistent; a failing projection is a proof of
    inconsistency, a passing one is not a proof of consistency.
    """
    return History.from_events(ev for ev in h if ev.kind is Kind.CRASH or ev.block in blocks)
