"""Simulated block device, page encryption and the integrity store.

The disk keeps two tiers per block.  ``persisted`` survives a crash;
``volatile`` holds completed writes that a crash may or may not keep.  A
crash picks, per block, a point in the sequence persisted value, volatile
writes, in-flight writes; everything up to that point is retained.

A small metadata region sits past the application blocks.  It holds the
on-disk layers of the integrity tree and is written through immediately
(it never has a volatile tier).
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import simpy
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .block_model import Sync

DEFAULT_BLOCK_SIZE = 4096
ARITY = 128
HASH_SIZE = 32
NODE_BYTES = ARITY * HASH_SIZE
NONCE_SIZE = 12
TAG_SIZE = 16
ZERO_LEAF = bytes(HASH_SIZE)


class OutOfRange(IndexError):
    pass


class IntegrityFault(RuntimeError):
    """Stored data or metadata failed authentication."""


# ---------------------------------------------------------------------------
# Virtual disk


@dataclass(frozen=True)
class BlockIO:
    write: bool
    block: int
    payload: bytes | None = None
    sync: Sync = Sync.NONE

    @classmethod
    def read(cls, block: int) -> "BlockIO":
        return cls(False, block)

    @classmethod
    def put(cls, block: int, payload: bytes, sync: Sync = Sync.NONE) -> "BlockIO":
        return cls(True, block, payload, Sync(sync))


@dataclass
class _InFlight:
    io: BlockIO
    done: simpy.Event


class VirtualDisk:
    """Two-tier block store driven by a simpy environment.

    ``submit`` returns an event that fires when the I/O completes; its value
    is the page for reads and None for writes.  Completion order across
    blocks follows the latency model, so concurrent writes may complete out
    of submission order.
    """

    def __init__(
        self,
        env: simpy.Environment,
        num_blocks: int,
        block_size: int = DEFAULT_BLOCK_SIZE,
        meta_blocks: int = 0,
        meta_layers: int = 0,
        latency: float = 0.0001,
        jitter: float = 0.0,
        rng: random.Random | None = None,
    ):
        if num_blocks <= 0 or block_size <= 0:
            raise ValueError("disk needs at least one block of positive size")
        self.env = env
        self.num_blocks = num_blocks
        self.block_size = block_size
        self.meta_blocks = meta_blocks
        self.meta_layers = meta_layers
        self.latency = latency
        self.jitter = jitter
        self.rng = rng or random.Random(0)
        self.zero_page = bytes(block_size)
        self.persisted: dict[int, bytes] = {}
        self.volatile: dict[int, list[bytes]] = {}
        self.inflight: dict[int, list[_InFlight]] = {}
        self.meta = bytearray(meta_blocks * block_size)
        self.epoch = 0
        self.submitted = 0
        self.completed = 0

    # -- application I/O

    def submit(self, io: BlockIO) -> simpy.Event:
        if not 0 <= io.block < self.num_blocks:
            raise OutOfRange(f"block {io.block} outside 0..{self.num_blocks - 1}")
        if io.write and (io.payload is None or len(io.payload) != self.block_size):
            raise ValueError(f"write payload must be exactly {self.block_size} bytes")
        done = self.env.event()
        rec = _InFlight(io, done)
        if io.write:
            self.inflight.setdefault(io.block, []).append(rec)
            if io.sync & Sync.PREFLUSH:
                # Writes completed before this submission must be durable
                # whenever this write is.
                self.flush()
        self.submitted += 1
        self.env.process(self._complete(rec, self.epoch))
        return done

    def _delay(self) -> float:
        if self.jitter:
            return self.latency + self.rng.uniform(0.0, self.jitter)
        return self.latency

    def _complete(self, rec: _InFlight, epoch: int):
        yield self.env.timeout(self._delay())
        if epoch != self.epoch:
            return
        io = rec.io
        self.completed += 1
        if not io.write:
            rec.done.succeed(self.current(io.block))
            return
        self.inflight[io.block].remove(rec)
        if io.sync & Sync.PREFLUSH:
            self.flush()
        if io.sync & Sync.FUA:
            self.persisted[io.block] = io.payload
            self.volatile.pop(io.block, None)
        else:
            self.volatile.setdefault(io.block, []).append(io.payload)
        rec.done.succeed(None)

    def flush(self) -> None:
        for block, log in self.volatile.items():
            if log:
                self.persisted[block] = log[-1]
        self.volatile.clear()

    def current(self, block: int) -> bytes:
        """What a read completing now returns."""
        log = self.volatile.get(block)
        if log:
            return log[-1]
        return self.persisted.get(block, self.zero_page)

    # -- crash

    def crash_candidates(self, block: int) -> list[bytes]:
        return (
            [self.persisted.get(block, self.zero_page)]
            + list(self.volatile.get(block, ()))
            + [rec.io.payload for rec in self.inflight.get(block, ())]
        )

    def crash(self, choice: random.Random | int | dict[int, int] | None = None) -> dict[int, int]:
        """Lose volatile state, keeping a per-block suffix point.

        ``choice`` is a seed, an RNG, or an explicit map from block to the
        index into :meth:`crash_candidates`; unlisted blocks keep index 0.
        Returns the indices used.  Pending completions never fire.
        """
        blocks = sorted(set(self.volatile) | {b for b, recs in self.inflight.items() if recs})
        if isinstance(choice, dict):
            picks = {b: choice.get(b, 0) for b in blocks}
        else:
            rng = choice if isinstance(choice, random.Random) else random.Random(choice)
            picks = {b: rng.randrange(len(self.crash_candidates(b))) for b in blocks}
        for b, idx in picks.items():
            cands = self.crash_candidates(b)
            if not 0 <= idx < len(cands):
                raise ValueError(f"block {b}: suffix point {idx} out of range")
            self.persisted[b] = cands[idx]
        self.volatile.clear()
        self.inflight.clear()
        self.epoch += 1
        return picks

    # -- metadata region (write-through)

    def meta_read(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > len(self.meta):
            raise OutOfRange("metadata access out of range")
        return bytes(self.meta[offset : offset + length])

    def meta_write(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > len(self.meta):
            raise OutOfRange("metadata access out of range")
        self.meta[offset : offset + len(data)] = data

    # -- images

    def snapshot(self) -> "DiskImage":
        pages = [self.persisted.get(b, self.zero_page) for b in range(self.num_blocks)]
        return DiskImage(self.block_size, self.num_blocks, self.meta_layers, pages, bytes(self.meta))

    def restore(self, image: "DiskImage") -> None:
        """Replace the persisted tier and metadata region with ``image``.

        The volatile tier is discarded; in-flight writes still land when
        they complete.
        """
        if (image.block_size, image.num_blocks, len(image.meta)) != (
            self.block_size, self.num_blocks, len(self.meta)
        ):
            raise ValueError("image geometry does not match the disk")
        self.persisted = {b: p for b, p in enumerate(image.pages) if p != self.zero_page}
        self.volatile.clear()
        self.meta[:] = image.meta

    def raw_read(self, block: int) -> bytes:
        return self.current(block)

    def raw_write(self, block: int, page: bytes) -> None:
        """Overwrite a persisted page behind the owner's back."""
        self.volatile.pop(block, None)
        self.persisted[block] = page


_IMAGE_HEADER = struct.Struct("<4sIIQI")
_IMAGE_MAGIC = b"RSHD"
_IMAGE_VERSION = 1


@dataclass
class DiskImage:
    block_size: int
    num_blocks: int
    meta_layers: int
    pages: list[bytes]
    meta: bytes = b""

    def to_bytes(self) -> bytes:
        head = _IMAGE_HEADER.pack(_IMAGE_MAGIC, _IMAGE_VERSION, self.block_size, self.num_blocks, self.meta_layers)
        return head + b"".join(self.pages) + self.meta

    @classmethod
    def from_bytes(cls, data: bytes) -> "DiskImage":
        if len(data) < _IMAGE_HEADER.size:
            raise ValueError("truncated disk image")
        magic, version, bs, nb, layers = _IMAGE_HEADER.unpack_from(data)
        if magic != _IMAGE_MAGIC or version != _IMAGE_VERSION:
            raise ValueError("not a disk image")
        body = data[_IMAGE_HEADER.size :]
        if len(body) < bs * nb or (len(body) - bs * nb) % bs:
            raise ValueError("disk image body has the wrong length")
        pages = [body[i * bs : (i + 1) * bs] for i in range(nb)]
        return cls(bs, nb, layers, pages, body[bs * nb :])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "DiskImage":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Encryption


def nonce_for(block: int, write_index: int) -> bytes:
    return struct.pack("<QI", write_index, block & 0xFFFFFFFF)


class CipherContext:
    """Page AEAD and message MAC keys derived from one deployment secret.

    Each ballot gets its own AEAD key so that a write index reused after a
    rollback never reuses a (key, nonce) pair.
    """

    def __init__(self, master_key: bytes):
        if len(master_key) != 32:
            raise ValueError("master key must be 32 bytes")
        self._master = master_key
        self.mac_key = self._derive(b"mac")
        self.tree_key = self._derive(b"tree")
        self._aead: dict[int, AESGCM] = {}

    def _derive(self, label: bytes) -> bytes:
        return hmac.new(self._master, label, hashlib.sha256).digest()

    def aead(self, ballot: int) -> AESGCM:
        if ballot not in self._aead:
            self._aead[ballot] = AESGCM(self._derive(b"aead" + struct.pack("<I", ballot)))
        return self._aead[ballot]

    @staticmethod
    def _aad(block: int) -> bytes:
        return struct.pack("<Q", block)

    def seal(self, block: int, write_index: int, ballot: int, plaintext: bytes) -> tuple[bytes, bytes]:
        """Encrypt a page; returns (ciphertext page, 32-byte leaf)."""
        nonce = nonce_for(block, write_index)
        out = self.aead(ballot).encrypt(nonce, plaintext, self._aad(block))
        ct, tag = out[:-TAG_SIZE], out[-TAG_SIZE:]
        return ct, nonce + tag + struct.pack("<I", ballot)

    def open(self, block: int, page: bytes, leaf: bytes) -> bytes:
        if leaf == ZERO_LEAF:
            if any(page):
                raise IntegrityFault(f"block {block}: data present where none was written")
            return page
        nonce, tag = leaf[:NONCE_SIZE], leaf[NONCE_SIZE : NONCE_SIZE + TAG_SIZE]
        (ballot,) = struct.unpack("<I", leaf[NONCE_SIZE + TAG_SIZE :])
        if nonce[8:] != struct.pack("<I", block & 0xFFFFFFFF):
            raise IntegrityFault(f"block {block}: leaf belongs to another block")
        try:
            return self.aead(ballot).decrypt(nonce, page + tag, self._aad(block))
        except InvalidTag:
            raise IntegrityFault(f"block {block}: page failed authentication") from None

    def sign(self, data: bytes) -> bytes:
        return hmac.new(self.mac_key, data, hashlib.sha256).digest()

    def verify(self, data: bytes, mac: bytes) -> bool:
        return hmac.compare_digest(self.sign(data), mac)


def leaf_write_index(leaf: bytes) -> int:
    return struct.unpack_from("<Q", leaf)[0]


# ---------------------------------------------------------------------------
# Integrity tree


def layer_sizes(num_leaves: int) -> list[int]:
    """Node counts from the leaves (layer 0) up to the single root."""
    sizes = [num_leaves]
    while sizes[-1] > 1:
        sizes.append(-(-sizes[-1] // ARITY))
    return sizes


def meta_bytes_needed(num_leaves: int, disk_layers: int) -> int:
    sizes = layer_sizes(num_leaves)
    return sum(-(-n // ARITY) * NODE_BYTES for n in sizes[:disk_layers])


def meta_blocks_needed(num_leaves: int, disk_layers: int, block_size: int = DEFAULT_BLOCK_SIZE) -> int:
    return -(-meta_bytes_needed(num_leaves, disk_layers) // block_size)


@dataclass
class IntegrityStore:
    """Per-block leaves under a keyed Merkle tree of fixed arity.

    Layers below ``disk_layers`` live in the disk's metadata region, one
    128-child group per node slot; the rest are in memory.  Reading from an
    on-disk layer verifies the group against its parent, climbing until a
    memory-resident ancestor is reached.
    """

    num_leaves: int
    key: bytes
    disk_layers: int = 0
    disk: VirtualDisk | None = None
    verify: bool = True
    _mem: dict[int, bytearray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.sizes = layer_sizes(self.num_leaves)
        if not 0 <= self.disk_layers < len(self.sizes):
            raise ValueError(
                f"disk_layers must be below the {len(self.sizes)} tree layers for {self.num_leaves} leaves"
            )
        if self.disk_layers and self.disk is None:
            raise ValueError("on-disk layers need a disk")
        self._base = []
        off = 0
        for n in self.sizes[: self.disk_layers]:
            self._base.append(off)
            off += -(-n // ARITY) * NODE_BYTES
        if self.disk_layers and len(self.disk.meta) < off:
            raise ValueError("disk metadata region too small for the on-disk layers")
        self.format()

    # -- geometry

    def memory_footprint(self) -> int:
        return sum(len(layer) for layer in self._mem.values())

    def _node_hash(self, children: bytes) -> bytes:
        return hmac.new(self.key, children, hashlib.sha256).digest()

    def format(self) -> None:
        """Reset every leaf to the unwritten state and rebuild the tree."""
        group_hash = self._node_hash(ZERO_LEAF * ARITY)
        below_full, below_tail = ZERO_LEAF, None
        for layer, n in enumerate(self.sizes):
            if layer == 0:
                full_node, tail_node = ZERO_LEAF, ZERO_LEAF
            else:
                # Children are uniform except possibly the last, partial group.
                prev = self.sizes[layer - 1]
                full_group = below_full * ARITY
                full_node = self._node_hash(full_group)
                rem = prev % ARITY
                if rem == 0:
                    tail_children = below_full * (ARITY - 1) + (below_tail or below_full)
                else:
                    tail_children = below_full * (rem - 1) + (below_tail or below_full)
                tail_node = self._node_hash(tail_children)
            data = bytearray(full_node * (n - 1) + tail_node)
            if layer < self.disk_layers:
                self.disk.meta_write(self._base[layer], bytes(data).ljust(-(-n // ARITY) * NODE_BYTES, b"\0"))
            else:
                self._mem[layer] = data
            below_full, below_tail = full_node, tail_node
        del group_hash

    def _group_bounds(self, layer: int, group: int) -> tuple[int, int]:
        lo = group * ARITY
        return lo, min(lo + ARITY, self.sizes[layer])

    def _read_group(self, layer: int, group: int) -> bytes:
        lo, hi = self._group_bounds(layer, group)
        if layer in self._mem:
            return bytes(self._mem[layer][lo * HASH_SIZE : hi * HASH_SIZE])
        return self.disk.meta_read(self._base[layer] + group * NODE_BYTES, (hi - lo) * HASH_SIZE)

    def _write_node(self, layer: int, idx: int, value: bytes) -> None:
        if layer in self._mem:
            self._mem[layer][idx * HASH_SIZE : (idx + 1) * HASH_SIZE] = value
        else:
            self.disk.meta_write(self._base[layer] + idx * HASH_SIZE, value)

    def _node(self, layer: int, idx: int) -> bytes:
        if layer in self._mem:
            return bytes(self._mem[layer][idx * HASH_SIZE : (idx + 1) * HASH_SIZE])
        return self.disk.meta_read(self._base[layer] + idx * HASH_SIZE, HASH_SIZE)

    def _verified_path(self, leaf: int) -> list[bytes]:
        """Groups containing the leaf and each on-disk ancestor, verified."""
        groups = []
        idx = leaf
        for layer in range(self.disk_layers):
            group = idx // ARITY
            data = self._read_group(layer, group)
            parent = self._node(layer + 1, group)
            if self.verify and not hmac.compare_digest(self._node_hash(data), parent):
                raise IntegrityFault(f"metadata layer {layer} group {group} failed verification")
            groups.append(data)
            idx = group
        return groups

    # -- leaf access

    def _check(self, block: int) -> None:
        if not 0 <= block < self.num_leaves:
            raise OutOfRange(f"leaf {block} outside 0..{self.num_leaves - 1}")

    def get(self, block: int) -> bytes:
        self._check(block)
        if self.disk_layers == 0:
            return self._node(0, block)
        groups = self._verified_path(block)
        off = (block % ARITY) * HASH_SIZE
        return groups[0][off : off + HASH_SIZE]

    def put(self, block: int, leaf: bytes) -> None:
        if len(leaf) != HASH_SIZE:
            raise ValueError("leaf must be 32 bytes")
        self._check(block)
        if self.disk_layers:
            self._verified_path(block)
        self._write_node(0, block, leaf)
        idx = block
        for layer in range(1, len(self.sizes)):
            group = idx // ARITY
            self._write_node(layer, group, self._node_hash(self._read_group(layer - 1, group)))
            idx = group

    def root(self) -> bytes:
        return self._node(len(self.sizes) - 1, 0)

    def leaves(self) -> list[bytes]:
        """Every leaf, verified."""
        out = []
        for group in range(-(-self.num_leaves // ARITY)):
            if self.disk_layers:
                data = self._verified_path(group * ARITY)[0]
            else:
                data = self._read_group(0, group)
            out.extend(data[i : i + HASH_SIZE] for i in range(0, len(data), HASH_SIZE))
        return out

    def load(self, leaves: list[bytes]) -> None:
        """Replace all leaves at once and rebuild every layer."""
        if len(leaves) != self.num_leaves:
            raise ValueError("leaf count mismatch")
        layer_data = b"".join(leaves)
        for layer, n in enumerate(self.sizes):
            if layer:
                below = layer_data
                groups = [below[g * NODE_BYTES : (g + 1) * NODE_BYTES] for g in range(n)]
                layer_data = b"".join(self._node_hash(g) for g in groups)
            if layer in self._mem:
                self._mem[layer][:] = layer_data
            else:
                self.disk.meta_write(self._base[layer], layer_data)


class Storage:
    """A node's encrypted, integrity-protected view of its disk."""

    def __init__(self, disk: VirtualDisk, cipher: CipherContext, hashes: IntegrityStore):
        self.disk = disk
        self.cipher = cipher
        self.hashes = hashes

    def seal(self, block: int, write_index: int, ballot: int, plaintext: bytes) -> tuple[bytes, bytes]:
        return self.cipher.seal(block, write_index, ballot, plaintext)

    def open(self, block: int, page: bytes) -> bytes:
        return self.cipher.open(block, page, self.hashes.get(block))


LatencyModel = Callable[[random.Random], float]
