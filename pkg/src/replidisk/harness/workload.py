"""Deterministic block I/O workloads."""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..block_model import Sync

SHAPES = ("seq", "rand", "contended")
FSYNC = Sync.FUA | Sync.PREFLUSH
HOT_BLOCKS = 4


@dataclass(frozen=True)
class IoOp:
    write: bool
    block: int
    sync: Sync = Sync.NONE

    def __str__(self) -> str:
        if not self.write:
            return f"R{self.block}"
        return f"W{self.block}" + ("" if not self.sync else f"[{self.sync.code()}]")


def generate(
    shape: str,
    blocks: int,
    threads: int,
    ops: int,
    fsync_every: int = 0,
    rng: random.Random | None = None,
    write_ratio: float = 0.6,
) -> list[list[IoOp]]:
    """Per-thread op lists.

    ``seq`` walks each thread through its own slice of the disk, ``rand``
    picks blocks uniformly, ``contended`` confines every thread to a few hot
    blocks. With ``fsync_every`` k, every k-th op of a thread is a write
    carrying FUA and PREFLUSH, the way an fsync reaches the device.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown workload {shape!r}; expected one of {SHAPES}")
    rng = rng or random.Random(0)
    out = []
    for t in range(threads):
        lo = t * blocks // threads
        span = max(1, (t + 1) * blocks // threads - lo)
        cursor = 0
        mine = []
        for i in range(1, ops + 1):
            if shape == "seq":
                block = lo + cursor % span
                cursor += 1
            elif shape == "rand":
                block = rng.randrange(blocks)
            else:
                block = rng.randrange(min(HOT_BLOCKS, blocks))
            if fsync_every and i % fsync_every == 0:
                mine.append(IoOp(True, block, FSYNC))
            else:
                mine.append(IoOp(rng.random() < write_ratio, block))
        out.append(mine)
    return out


# ext4 open/write/fsync of a small file, as sector numbers and flags.
_FILE_OPS = (
    ("open", ((True, 8, Sync.NONE), (False, 33928, Sync.NONE), (False, 1096, Sync.NONE))),
    ("write", ((True, 1048664, Sync.NONE), (True, 1048672, Sync.NONE))),
    ("fsync", ((True, 1048680, FSYNC), (True, 1048680, Sync.FUA), (True, 266240, Sync.NONE))),
)


def file_ops_preset(blocks: int, repeat: int = 1, sector_size: int = 512, block_size: int = 4096) -> list[IoOp]:
    """Block I/Os an ext4 open, write and fsync turn into, folded onto ``blocks``."""
    per_block = block_size // sector_size
    seq = []
    for _ in range(repeat):
        for _name, ios in _FILE_OPS:
            for write, sector, sync in ios:
                seq.append(IoOp(write, (sector // per_block) % blocks, sync))
    return seq
