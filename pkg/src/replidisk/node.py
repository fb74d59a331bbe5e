"""Replica state shared by the primary, backup and recovery roles."""

from __future__ import annotations

import enum
import random
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import simpy

from .gate import ConflictGate
from .storage import CipherContext, IntegrityStore, VirtualDisk, meta_blocks_needed
from .transport import DATA_TYPES, host_of, BadFrame, ConfigService, Configuration, MsgType, Network, WireMessage

MUTANTS = ("ack-off-by-one", "skip-merkle-verify", "backup-out-of-order")


class Role(enum.Enum):
    IDLE = "idle"
    PRIMARY = "primary"
    BACKUP = "backup"
    RECOVERING = "recovering"


class NotActive(RuntimeError):
    """The node cannot serve: its ballot is stale or it is not the primary."""


class Halted(RuntimeError):
    """The node stopped after an integrity fault."""


class CheckFailed(RuntimeError):
    """Initialization found an existing deployment."""


class Machine:
    """Physical host: owns the disk, hands out a fresh identity per boot."""

    def __init__(self, name: str, disk: VirtualDisk):
        self.name = name
        self.disk = disk
        self.boots = 0
        self.node: "Node | None" = None

    def new_identity(self) -> str:
        self.boots += 1
        return f"{self.name}.{self.boots}"


machine_of = host_of


@dataclass
class Hooks:
    """Callbacks from nodes to whoever drives them (the harness)."""

    halted: Callable[["Node", str], None] = lambda node, why: None
    stopped_serving: Callable[["Node", str], None] = lambda node, why: None
    activated: Callable[["Node"], None] = lambda node: None


@dataclass
class Settings:
    num_blocks: int
    block_size: int = 4096
    disk_layers: int = 0
    p1b_timeout: float = 0.05
    reply_timeout: float = 0.05
    scan_window: int = 64
    mutants: frozenset[str] = frozenset()

    def meta_blocks(self) -> int:
        return meta_blocks_needed(self.num_blocks, self.disk_layers, self.block_size)


@dataclass
class NodeStats:
    bad_frames: int = 0
    rejected: Counter = field(default_factory=Counter)
    accepted_data: list[tuple[float, str, int, int]] = field(default_factory=list)
    duplicates: int = 0
    fenced: list[tuple[float, int]] = field(default_factory=list)  # (time, new seen ballot)


class NodeBase:
    def __init__(
        self,
        env: simpy.Environment,
        machine: Machine,
        net: Network,
        cipher: CipherContext,
        service: ConfigService,
        settings: Settings,
        hooks: Hooks | None = None,
    ):
        self.env = env
        self.machine = machine
        self.disk = machine.disk
        self.net = net
        self.cipher = cipher
        self.service = service
        self.settings = settings
        self.hooks = hooks or Hooks()
        self.id = machine.new_identity()
        machine.node = self
        self.up = True
        self.role = Role.IDLE
        self.ballot = -1
        self.seen_ballot = -1
        self.write_index = 0
        self._base_index = 0
        self._service_epoch = 0
        self.serving = False
        self.halt_reason: str | None = None
        self.last_recovery = None
        self.conf: Configuration | None = None
        self.gate = ConflictGate()
        self.hashes = IntegrityStore(
            settings.num_blocks,
            cipher.tree_key,
            settings.disk_layers,
            self.disk if settings.disk_layers else None,
            verify=("skip-merkle-verify" not in settings.mutants),
        )
        self.stats = NodeStats()
        self._inbox: dict[tuple[MsgType, int], simpy.Event] = {}
        net.attach(self.id, self._on_frame)

    # -- state

    @property
    def active(self) -> bool:
        return self.up and self.ballot == self.seen_ballot and self.role in (Role.PRIMARY, Role.BACKUP)

    def mutant(self, name: str) -> bool:
        return name in self.settings.mutants

    def crash(self) -> None:
        """The machine loses power: memory state is gone, traffic stops."""
        self.up = False
        self.net.detach(self.id)
        self.gate.clear()
        for ev in self._inbox.values():
            if not ev.triggered:
                ev.succeed(None)
        self._inbox.clear()

    # -- messaging

    def send(self, dst: str, msg: WireMessage) -> None:
        if not self.up:
            return
        self.net.send(self.id, dst, msg.encode(self.cipher.mac_key), msg.type)

    def raise_seen(self, ballot: int) -> None:
        if ballot > self.seen_ballot:
            self.seen_ballot = ballot
            self.stats.fenced.append((self.env.now, ballot))

    def fence_check(self, msg: WireMessage) -> bool:
        if msg.type in DATA_TYPES:
            return self.active and msg.ballot == self.seen_ballot
        return msg.ballot >= self.seen_ballot

    def _on_frame(self, src: str, frame: bytes) -> None:
        if not self.up:
            return
        try:
            msg = WireMessage.decode(frame, self.cipher.mac_key)
        except BadFrame:
            self.stats.bad_frames += 1
            return
        if not self.fence_check(msg):
            self.stats.rejected[msg.type] += 1
            return
        if msg.type in DATA_TYPES:
            self.stats.accepted_data.append((self.env.now, src, msg.ballot, msg.write_index))
        handler = getattr(self, _HANDLERS[msg.type])
        handler(src, msg)

    def _expect(self, mtype: MsgType, key: int = 0) -> simpy.Event:
        ev = self.env.event()
        self._inbox[(mtype, key)] = ev
        return ev

    def _fulfil(self, mtype: MsgType, key: int, value: object) -> bool:
        ev = self._inbox.pop((mtype, key), None)
        if ev is None or ev.triggered:
            return False
        ev.succeed(value)
        return True

    def _await(self, ev: simpy.Event, timeout: float):
        """Yield-from helper: value of ``ev`` or None on timeout."""
        res = yield ev | self.env.timeout(timeout)
        return res[ev] if ev in res else None

    def drained(self):
        """Wait until no gated operation is queued or in flight."""
        while not self.gate.idle and self.up:
            yield self.env.timeout(self.disk.latency or 1e-6)

    def _unpack_u64(self, payload: bytes) -> int:
        return struct.unpack("<Q", payload[:8])[0]


_HANDLERS = {
    MsgType.WRITE_REPL: "on_write_repl",
    MsgType.ACK: "on_ack",
    MsgType.MATCH_A: "on_unexpected",
    MsgType.MATCH_B: "on_unexpected",
    MsgType.P1A: "on_p1a",
    MsgType.P1B: "on_p1b",
    MsgType.RECONFIG: "on_reconfig",
    MsgType.HASH_REQ: "on_hash_req",
    MsgType.HASH_RESP: "on_hash_resp",
    MsgType.PAGE_REQ: "on_page_req",
    MsgType.PAGE_RESP: "on_page_resp",
}


def new_disk(env: simpy.Environment, settings: Settings, latency: float, jitter: float, rng: random.Random) -> VirtualDisk:
    return VirtualDisk(
        env,
        settings.num_blocks,
        settings.block_size,
        meta_blocks=settings.meta_blocks(),
        meta_layers=settings.disk_layers,
        latency=latency,
        jitter=jitter,
        rng=rng,
    )


from .backup import BackupRole  # noqa: E402
from .primary import PrimaryRole  # noqa: E402
from .recovery import RecoveryRole  # noqa: E402


class Node(PrimaryRole, BackupRole, RecoveryRole, NodeBase):
    def on_unexpected(self, src: str, msg: WireMessage) -> None:
        self.stats.rejected[msg.type] += 1

    def __repr__(self) -> str:
        return f"<Node {self.id} {self.role.value} b={self.ballot}/{self.seen_ballot} wi={self.write_index}>"
