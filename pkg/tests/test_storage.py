import random

import pytest
import simpy

from replidisk.block_model import Sync
from replidisk.storage import (
    ARITY,
    ZERO_LEAF,
    BlockIO,
    CipherContext,
    DiskImage,
    IntegrityFault,
    IntegrityStore,
    OutOfRange,
    VirtualDisk,
    layer_sizes,
    leaf_write_index,
    meta_blocks_needed,
)

BS = 512
KEY = bytes(range(32))


def page(tag: int) -> bytes:
    return bytes([tag % 256]) * BS


def run_io(env, disk, io):
    ev = disk.submit(io)
    env.run(until=ev)
    return ev.value


@pytest.fixture
def env():
    return simpy.Environment()


@pytest.fixture
def disk(env):
    return VirtualDisk(env, 8, BS, latency=1e-4)


# ---------------------------------------------------------------------------
# Virtual disk


def test_read_returns_latest_completed_write(env, disk):
    assert run_io(env, disk, BlockIO.read(3)) == bytes(BS)
    run_io(env, disk, BlockIO.put(3, page(1)))
    run_io(env, disk, BlockIO.put(3, page(2)))
    assert run_io(env, disk, BlockIO.read(3)) == page(2)


def test_bounds_and_payload_size(env, disk):
    with pytest.raises(OutOfRange):
        disk.submit(BlockIO.read(8))
    with pytest.raises(ValueError):
        disk.submit(BlockIO.put(0, b"short"))


def test_fua_write_survives_every_crash(env, disk):
    run_io(env, disk, BlockIO.put(0, page(1), Sync.FUA))
    for seed in range(20):
        d = VirtualDisk(env, 8, BS)
        d.persisted = dict(disk.persisted)
        d.volatile = {b: list(v) for b, v in disk.volatile.items()}
        d.crash(seed)
        assert d.current(0) == page(1)


def test_unflagged_write_may_be_lost(env, disk):
    run_io(env, disk, BlockIO.put(0, page(1)))
    assert disk.crash_candidates(0) == [bytes(BS), page(1)]
    disk.crash({0: 0})
    assert disk.current(0) == bytes(BS)


def test_crash_keeps_a_prefix_of_each_block(env, disk):
    for i in range(1, 4):
        run_io(env, disk, BlockIO.put(2, page(i)))
    disk.crash({2: 2})
    assert disk.current(2) == page(2)


def test_preflush_persists_earlier_completed_writes(env, disk):
    run_io(env, disk, BlockIO.put(0, page(1)))
    run_io(env, disk, BlockIO.put(1, page(2)))
    run_io(env, disk, BlockIO.put(5, page(3), Sync.PREFLUSH))
    assert disk.persisted[0] == page(1) and disk.persisted[1] == page(2)


def test_crash_cancels_inflight_completions(env, disk):
    ev = disk.submit(BlockIO.put(0, page(1)))
    disk.crash({0: 1})
    env.run(until=1.0)
    assert not ev.triggered
    assert disk.current(0) == page(1)


def test_crash_suffix_point_out_of_range(env, disk):
    run_io(env, disk, BlockIO.put(0, page(1)))
    with pytest.raises(ValueError):
        disk.crash({0: 5})


def test_snapshot_restore_rolls_back(env, disk):
    run_io(env, disk, BlockIO.put(0, page(1), Sync.FUA))
    snap = disk.snapshot()
    run_io(env, disk, BlockIO.put(0, page(2), Sync.FUA))
    disk.restore(snap)
    assert disk.current(0) == page(1)


def test_image_round_trip(tmp_path, env, disk):
    run_io(env, disk, BlockIO.put(4, page(9), Sync.FUA))
    img = disk.snapshot()
    img.save(tmp_path / "d.img")
    back = DiskImage.load(tmp_path / "d.img")
    assert back == img
    with pytest.raises(ValueError):
        DiskImage.from_bytes(b"nope")
    with pytest.raises(ValueError):
        DiskImage.from_bytes(img.to_bytes()[:-1])


def test_concurrent_writes_complete_out_of_order():
    env = simpy.Environment()
    d = VirtualDisk(env, 64, BS, latency=1e-4, jitter=1e-4, rng=random.Random(1))
    order = []
    for b in range(20):
        d.submit(BlockIO.put(b, page(b))).callbacks.append(lambda ev, b=b: order.append(b))
    env.run()
    assert sorted(order) == list(range(20)) and order != list(range(20))


# ---------------------------------------------------------------------------
# Encryption


def test_seal_open_round_trip():
    c = CipherContext(KEY)
    ct, leaf = c.seal(3, 17, 1, page(5))
    assert ct != page(5) and len(ct) == BS and len(leaf) == 32
    assert leaf_write_index(leaf) == 17
    assert c.open(3, ct, leaf) == page(5)


def test_open_rejects_tampering_and_swaps():
    c = CipherContext(KEY)
    ct, leaf = c.seal(3, 17, 1, page(5))
    bad = bytearray(ct)
    bad[0] ^= 1
    with pytest.raises(IntegrityFault):
        c.open(3, bytes(bad), leaf)
    with pytest.raises(IntegrityFault):
        c.open(4, ct, leaf)
    old_ct, old_leaf = c.seal(3, 16, 1, page(4))
    with pytest.raises(IntegrityFault):
        c.open(3, old_ct, leaf)


def test_unwritten_leaf_accepts_only_zero_pages():
    c = CipherContext(KEY)
    assert c.open(0, bytes(BS), ZERO_LEAF) == bytes(BS)
    with pytest.raises(IntegrityFault):
        c.open(0, page(1), ZERO_LEAF)


def test_ballots_use_distinct_keys():
    c = CipherContext(KEY)
    a, _ = c.seal(0, 1, 1, page(1))
    b, _ = c.seal(0, 1, 2, page(1))
    assert a != b


def test_bad_master_key():
    with pytest.raises(ValueError):
        CipherContext(b"short")


def test_message_mac():
    c = CipherContext(KEY)
    assert c.verify(b"data", c.sign(b"data"))
    assert not c.verify(b"datA", c.sign(b"data"))


# ---------------------------------------------------------------------------
# Integrity tree


def store(num_leaves, layers, env=None):
    env = env or simpy.Environment()
    bs = 4096
    d = VirtualDisk(env, num_leaves, bs, meta_blocks=meta_blocks_needed(num_leaves, layers, bs), meta_layers=layers)
    return IntegrityStore(num_leaves, KEY, layers, d), d


def leaf(i):
    return i.to_bytes(4, "little") * 8


def test_layer_sizes():
    assert layer_sizes(1) == [1]
    assert layer_sizes(ARITY) == [ARITY, 1]
    assert layer_sizes(ARITY + 1) == [ARITY + 1, 2, 1]


@pytest.mark.parametrize("layers", [0, 1, 2])
def test_put_get_and_root_agree_across_layouts(layers):
    s, _ = store(300, layers)
    ref, _ = store(300, 0)
    for i in (0, 5, 127, 128, 299):
        s.put(i, leaf(i))
        ref.put(i, leaf(i))
    assert s.get(128) == leaf(128)
    assert s.get(1) == ZERO_LEAF
    assert s.root() == ref.root()
    assert s.leaves() == ref.leaves()


def test_too_many_disk_layers():
    with pytest.raises(ValueError):
        store(16, 2)


def test_disk_layer_tamper_is_detected():
    s, d = store(300, 1)
    s.put(7, leaf(7))
    d.meta[7 * 32] ^= 1
    with pytest.raises(IntegrityFault):
        s.get(7)


def test_second_layer_tamper_is_detected():
    s, d = store(300, 2)
    s.put(200, leaf(200))
    base = -(-300 // ARITY) * ARITY * 32
    d.meta[base] ^= 1
    with pytest.raises(IntegrityFault):
        s.get(5)


def test_rolled_back_metadata_is_detected():
    s, d = store(300, 1)
    s.put(7, leaf(1))
    old = bytes(d.meta)
    s.put(7, leaf(2))
    d.meta[:] = old
    with pytest.raises(IntegrityFault):
        s.get(7)


def test_verification_can_be_disabled():
    s, d = store(300, 1)
    s.verify = False
    s.put(7, leaf(7))
    d.meta[7 * 32] ^= 1
    assert s.get(7) != leaf(7)


def test_load_rebuilds_tree():
    s, _ = store(300, 1)
    ref, _ = store(300, 0)
    leaves = [leaf(i) for i in range(300)]
    s.load(leaves)
    for i, lf in enumerate(leaves):
        ref.put(i, lf)
    assert s.root() == ref.root()
    assert s.leaves() == leaves


def test_memory_footprint_shrinks_with_disk_layers():
    full, _ = store(300, 0)
    half, _ = store(300, 1)
    assert half.memory_footprint() < full.memory_footprint()


def test_leaf_bounds():
    s, _ = store(10, 0)
    with pytest.raises(OutOfRange):
        s.get(10)
    with pytest.raises(ValueError):
        s.put(0, b"x")
