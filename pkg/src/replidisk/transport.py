"""Signed frames, simulated links with an adversary, and the configuration service."""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

import simpy

MAC_SIZE = 32
_HEADER = struct.Struct("<BQQQBI")


class MsgType(enum.IntEnum):
    WRITE_REPL = 1
    ACK = 2
    MATCH_A = 3
    MATCH_B = 4
    P1A = 5
    P1B = 6
    RECONFIG = 7
    HASH_REQ = 8
    HASH_RESP = 9
    PAGE_REQ = 10
    PAGE_RESP = 11


DATA_TYPES = frozenset({MsgType.WRITE_REPL, MsgType.ACK})


class BadFrame(ValueError):
    pass


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    ballot: int = 0
    write_index: int = 0
    block: int = 0
    flags: int = 0
    payload: bytes = b""

    def body(self) -> bytes:
        return _HEADER.pack(self.type, self.ballot, self.write_index, self.block, self.flags, len(self.payload)) + self.payload

    def encode(self, mac_key: bytes) -> bytes:
        body = self.body()
        return body + hmac.new(mac_key, body, hashlib.sha256).digest()

    @classmethod
    def decode(cls, frame: bytes, mac_key: bytes) -> "WireMessage":
        if len(frame) < _HEADER.size + MAC_SIZE:
            raise BadFrame("short frame")
        body, mac = frame[:-MAC_SIZE], frame[-MAC_SIZE:]
        if not hmac.compare_digest(hmac.new(mac_key, body, hashlib.sha256).digest(), mac):
            raise BadFrame("bad mac")
        mtype, ballot, index, block, flags, plen = _HEADER.unpack_from(body)
        if plen != len(body) - _HEADER.size:
            raise BadFrame("payload length mismatch")
        try:
            mtype = MsgType(mtype)
        except ValueError:
            raise BadFrame(f"unknown message type {mtype}") from None
        return cls(mtype, ballot, index, block, flags, body[_HEADER.size :])


# ---------------------------------------------------------------------------
# Links and the adversary


@dataclass
class LinkRule:
    """One adversary action on a link.

    ``remaining`` counts messages still to affect (None means every message);
    ``types`` restricts the rule to some message types.
    """

    action: str  # drop | dup | delay | corrupt
    remaining: int | None = 1
    delay: float = 0.0
    types: frozenset[MsgType] | None = None

    def matches(self, msg_type: MsgType) -> bool:
        if self.remaining is not None and self.remaining <= 0:
            return False
        return self.types is None or msg_type in self.types


@dataclass
class Link:
    src: str
    dst: str
    latency: float
    extra_delay: float = 0.0
    rules: list[LinkRule] = field(default_factory=list)
    last_arrival: float = 0.0
    sent: int = 0


Handler = Callable[[str, bytes], None]


class Network:
    """Per-link FIFO delivery in simulated time.

    Endpoints are addressed by machine name; whatever node currently runs on
    a machine receives its traffic.  An unregistered endpoint drops traffic.
    """

    def __init__(self, env: simpy.Environment, latency: float = 0.0005, rng: random.Random | None = None):
        self.env = env
        self.latency = latency
        self.rng = rng or random.Random(0)
        self.links: dict[tuple[str, str], Link] = {}
        self.endpoints: dict[str, Handler] = {}
        self.log: list[tuple[float, str, str, int, str]] = []
        self.dropped = 0

    def link(self, src: str, dst: str) -> Link:
        """Links join machines, so faults survive a node's reboot."""
        key = (host_of(src), host_of(dst))
        if key not in self.links:
            self.links[key] = Link(*key, self.latency)
        return self.links[key]

    def attach(self, name: str, handler: Handler) -> None:
        self.endpoints[name] = handler

    def detach(self, name: str) -> None:
        self.endpoints.pop(name, None)

    def set_delay(self, src: str, dst: str, delay: float) -> None:
        """Extra one-way delay on every message of a link, order preserved."""
        self.link(src, dst).extra_delay = delay

    def add_rule(self, src: str, dst: str, rule: LinkRule) -> None:
        self.link(src, dst).rules.append(rule)

    def send(self, src: str, dst: str, frame: bytes, msg_type: MsgType) -> None:
        link = self.link(src, dst)
        link.sent += 1
        copies = [frame]
        hold = 0.0
        for rule in link.rules:
            if not rule.matches(msg_type):
                continue
            if rule.remaining is not None:
                rule.remaining -= 1
            if rule.action == "drop":
                copies = []
            elif rule.action == "dup":
                copies = copies + copies[:1]
            elif rule.action == "corrupt" and copies:
                buf = bytearray(copies[0])
                pos = self.rng.randrange(len(buf))
                buf[pos] ^= 1 << self.rng.randrange(8)
                copies[0] = bytes(buf)
            elif rule.action == "delay":
                hold = max(hold, rule.delay)
        self.log.append((self.env.now, src, dst, int(msg_type), "sent" if copies else "dropped"))
        if not copies:
            self.dropped += 1
            return
        arrival = max(self.env.now + link.latency + link.extra_delay, link.last_arrival)
        link.last_arrival = arrival
        for frame_copy in copies:
            # A held message leaves the FIFO lane, so later traffic may overtake it.
            self.env.process(self._deliver(src, dst, frame_copy, arrival + hold))

    def _deliver(self, src: str, dst: str, frame: bytes, at: float):
        yield self.env.timeout(at - self.env.now)
        handler = self.endpoints.get(dst)
        if handler is None:
            self.dropped += 1
            return
        handler(src, frame)


# ---------------------------------------------------------------------------
# Configurations


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Configuration:
    """Membership for one ballot; ``members[0]`` is the primary."""

    ballot: int
    members: tuple[str, ...]
    f: int

    def __post_init__(self) -> None:
        n = len(self.members)
        if len(set(self.members)) != n:
            raise ConfigError("duplicate member")
        if not self.f + 1 <= n <= 2 * self.f + 1:
            raise ConfigError(f"N={n} outside f+1..2f+1 for f={self.f}")

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def primary(self) -> str:
        return self.members[0]

    @property
    def backups(self) -> tuple[str, ...]:
        return self.members[1:]

    def encode(self) -> bytes:
        return struct.pack("<QI", self.ballot, self.f) + ",".join(self.members).encode()

    @classmethod
    def decode(cls, data: bytes) -> "Configuration":
        ballot, f = struct.unpack_from("<QI", data)
        return cls(ballot, tuple(data[12:].decode().split(",")), f)


@dataclass(frozen=True)
class MatchB:
    ballot: int
    all_conf: tuple[Configuration, ...]


def host_of(endpoint: str) -> str:
    """Machine part of a node id such as ``m1.3``."""
    return endpoint.split(".", 1)[0]


class ConfigService:
    """Trusted, append-only registry of configurations keyed by ballot."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.all_conf: dict[int, Configuration] = {}
        self.order: list[int] = []
        self.activated = -1

    def activate(self, ballot: int) -> None:
        """Record that every member of ``ballot`` holds the recovered state.

        Configurations older than the newest activated one can no longer be
        active, so recoveries stop contacting their members.
        """
        with self._lock:
            self.activated = max(self.activated, ballot)

    @property
    def highest_ballot(self) -> int:
        with self._lock:
            return max(self.all_conf, default=-1)

    def match_a(self, seen_ballot: int, conf: Configuration) -> MatchB:
        if conf.ballot != seen_ballot:
            raise ConfigError("configuration ballot must equal the sender's seen ballot")
        with self._lock:
            existing = self.all_conf.get(conf.ballot)
            if existing is not None and existing != conf:
                raise ConfigError(f"ballot {conf.ballot} already holds a different configuration")
            if existing is None:
                self.all_conf[conf.ballot] = conf
                self.order.append(conf.ballot)
            return MatchB(max(self.all_conf), tuple(self.all_conf[b] for b in sorted(self.all_conf)))
