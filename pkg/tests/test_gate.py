import random

import pytest

from replidisk.gate import ConflictGate


def make(gate, first, count=1, tag=None):
    started = []
    entry = gate.submit(first, lambda: started.append(tag), count, tag)
    return entry, started


def test_disjoint_blocks_start_at_once():
    g = ConflictGate()
    _, a = make(g, 0, tag="a")
    _, b = make(g, 1, tag="b")
    assert a == ["a"] and b == ["b"]


def test_same_block_waits_for_completion():
    g = ConflictGate()
    ea, _ = make(g, 3, tag="a")
    _, b = make(g, 3, tag="b")
    assert b == []
    g.complete(ea)
    assert b == ["b"]
    assert g.started == ["a", "b"]


def test_queue_blocks_later_overlapping_ops():
    # c touches block 1 only, but b (queued) covers 0..1, so c must wait
    # behind b to keep per-block order.
    g = ConflictGate()
    ea, _ = make(g, 0, tag="a")
    eb, b = make(g, 0, 2, tag="b")
    _, c = make(g, 1, tag="c")
    assert b == [] and c == []
    g.complete(ea)
    assert b == ["b"] and c == []
    g.complete(eb)
    assert c == ["c"]


def test_head_of_queue_release_stops_at_conflict():
    g = ConflictGate()
    e0, _ = make(g, 0, tag="x")
    e1, _ = make(g, 1, tag="y")
    make(g, 0, tag="a")
    make(g, 1, tag="b")
    g.complete(e0)
    assert g.started == ["x", "y", "a"]


def test_complete_unknown_entry():
    g = ConflictGate()
    e, _ = make(g, 0)
    g.complete(e)
    with pytest.raises(KeyError):
        g.complete(e)


def test_zero_count_rejected():
    with pytest.raises(ValueError):
        ConflictGate().submit(0, lambda: None, 0)


def test_random_schedule_preserves_per_block_order_and_exclusion():
    rng = random.Random(4)
    for _ in range(50):
        g = ConflictGate()
        running = []
        submitted: dict[int, list[int]] = {}
        started: dict[int, list[int]] = {}

        def starter(tag, first, count):
            def start():
                for b in range(first, first + count):
                    assert all(b not in range(e.first, e.first + e.count) for e in running)
                    started.setdefault(b, []).append(tag)
            return start

        for tag in range(40):
            if running and rng.random() < 0.4:
                e = running.pop(rng.randrange(len(running)))
                g.complete(e)
                running.extend(x for x in g.invoked.values() if x not in running)
            first, count = rng.randrange(6), rng.randint(1, 2)
            for b in range(first, first + count):
                submitted.setdefault(b, []).append(tag)
            e = g.submit(first, starter(tag, first, count), count, tag)
            running.extend(x for x in g.invoked.values() if x not in running)
        while running:
            g.complete(running.pop(0))
            running.extend(x for x in g.invoked.values() if x not in running)
        assert g.idle
        assert started == submitted
