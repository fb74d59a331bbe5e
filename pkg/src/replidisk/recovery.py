"""Initialization, fencing and ballot-based recovery.

A recovering node registers a new configuration with the configuration
service, fences every member of the configurations that might still be
active, picks the responder with the highest (ballot, write index), copies
its hashes, repairs every local page that fails verification, and hands the
same state to the other members of the new configuration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .storage import HASH_SIZE, BlockIO, IntegrityFault
from .transport import ConfigError, Configuration, MsgType, WireMessage

_P1B = struct.Struct("<qQ")  # responder's ballot, seen ballot
DONE = b"done"


class InsufficientQuorum(RuntimeError):
    """Too few nodes answered; the worst is assumed and recovery stops."""


class RecoveryAborted(RuntimeError):
    pass


@dataclass
class RecoveryReport:
    node: str = ""
    ballot: int = -1
    designated: str = ""
    designated_index: int = 0
    startup: float = 0.0
    hash_bytes: int = 0
    hash_time: float = 0.0
    pages_verified: int = 0
    pages_repaired: int = 0
    repaired_blocks: list[int] = field(default_factory=list)
    lost_designated: list[str] = field(default_factory=list)
    total_time: float = 0.0

    def lines(self) -> list[str]:
        return [
            f"recovery.node={self.node}",
            f"recovery.ballot={self.ballot}",
            f"recovery.designated={self.designated}",
            f"recovery.startup={self.startup:.6f}",
            f"recovery.hash_bytes={self.hash_bytes}",
            f"recovery.hash_time={self.hash_time:.6f}",
            f"recovery.pages_verified={self.pages_verified}",
            f"recovery.pages_repaired={self.pages_repaired}",
        ]


@dataclass
class _P1b:
    ballot: int
    write_index: int
    seen: int


class RecoveryRole:
    def _become(self, conf: Configuration) -> None:
        from .node import Role

        self.conf = conf
        self.ballot = conf.ballot
        self.seen_ballot = max(self.seen_ballot, conf.ballot)
        self._base_index = self.write_index
        if conf.primary == self.id:
            self.role = Role.PRIMARY
            self._init_primary()
        else:
            self.role = Role.BACKUP
            self._init_backup()

    # -- fresh deployment

    def initialize(self, conf: Configuration) -> None:
        from .node import CheckFailed

        self.seen_ballot = conf.ballot
        try:
            reply = self.service.match_a(conf.ballot, conf)
        except ConfigError as exc:
            raise CheckFailed(str(exc)) from None
        if reply.ballot != self.seen_ballot or reply.all_conf != (conf,):
            raise CheckFailed("configuration service already holds another deployment")
        self._become(conf)
        self.service.activate(conf.ballot)

    # -- answering a recoverer

    def on_p1a(self, src: str, msg: WireMessage) -> None:
        self.raise_seen(msg.ballot)
        self.stop_serving("fenced")
        self.env.process(self._answer_p1a(src, msg.ballot))

    def _answer_p1a(self, src: str, ballot: int):
        yield from self.drained()
        payload = _P1B.pack(self.ballot, self.seen_ballot)
        self.send(src, WireMessage(MsgType.P1B, ballot, self.write_index, 0, 0, payload))

    def on_p1b(self, src: str, msg: WireMessage) -> None:
        collector = getattr(self, "_p1bs", None)
        if collector is None or msg.ballot != self._recovery_ballot:
            return
        ballot, seen = _P1B.unpack(msg.payload)
        collector[src] = _P1b(ballot, msg.write_index, seen)
        wake = self._p1b_wake
        if not wake.triggered:
            wake.succeed()

    def on_hash_req(self, src: str, msg: WireMessage) -> None:
        self.env.process(self._serve_hashes(src, msg.ballot))

    def _serve_hashes(self, src: str, ballot: int):
        yield from self.drained()
        try:
            leaves = self.hashes.leaves()
        except IntegrityFault as exc:
            self.halt(str(exc))
            return
        self.send(src, WireMessage(MsgType.HASH_RESP, ballot, self.write_index, 0, 0, b"".join(leaves)))

    def on_hash_resp(self, src: str, msg: WireMessage) -> None:
        self._fulfil(MsgType.HASH_RESP, 0, (src, msg))

    def on_page_req(self, src: str, msg: WireMessage) -> None:
        def serve():
            page = yield self.disk.submit(BlockIO.read(msg.block))
            self.send(src, WireMessage(MsgType.PAGE_RESP, msg.ballot, 0, msg.block, 0, page))

        self.env.process(serve())

    def on_page_resp(self, src: str, msg: WireMessage) -> None:
        self._fulfil(MsgType.PAGE_RESP, msg.block, (src, msg))

    # -- recovering

    def recover(self, peers: tuple[str, ...], f: int):
        """Simpy process: become primary of a new configuration with ``peers``.

        Returns a RecoveryReport; raises InsufficientQuorum or RecoveryAborted.
        """
        from .node import Role

        start = self.env.now
        report = RecoveryReport(node=self.id)
        self.role = Role.RECOVERING
        while True:
            ballot = max(self.service.highest_ballot, self.seen_ballot) + 1
            conf = Configuration(ballot, (self.id,) + tuple(peers), f)
            self.seen_ballot = ballot
            try:
                reply = self.service.match_a(ballot, conf)
                break
            except ConfigError:
                continue
        report.ballot = ballot
        if reply.ballot > ballot:
            raise RecoveryAborted(f"ballot {reply.ballot} is already newer than {ballot}")
        floor = self.service.activated
        prior = [c for c in reply.all_conf if floor <= c.ballot < ballot]
        if not prior:
            raise RecoveryAborted("no earlier configuration to recover from")

        # Fence everything that might still be active and collect answers.
        self._recovery_ballot = ballot
        self._p1bs: dict[str, _P1b] = {}
        self._p1b_wake = self.env.event()
        targets = sorted({m for c in prior for m in c.members if m != self.id})
        for t in targets:
            self.send(t, WireMessage(MsgType.P1A, ballot))
        deadline = self.env.now + self.settings.p1b_timeout
        while not self._quorum(prior) and self.env.now < deadline:
            self._p1b_wake = self.env.event()
            yield self._p1b_wake | self.env.timeout(deadline - self.env.now)
        answers = dict(self._p1bs)
        self._p1bs = None
        if not self.up:
            raise RecoveryAborted("crashed during recovery")
        if not self._quorum(prior, answers):
            raise InsufficientQuorum(
                f"{len(answers)} of {len(targets)} nodes answered; quorum needs one per configuration "
                f"and {prior[-1].n - prior[-1].f} from ballot {prior[-1].ballot}"
            )
        if any(a.seen > ballot for a in answers.values()) or self.seen_ballot > ballot:
            raise RecoveryAborted("a newer recovery is under way")
        report.startup = self.env.now - start

        # Designated node: highest (ballot, write index); fall back on loss.
        order = sorted(answers.items(), key=lambda kv: (kv[1].ballot, kv[1].write_index, kv[0]), reverse=True)
        index = None
        for cand, _ in order:
            index = yield from self._repair_from(cand, ballot, report)
            if index is not None:
                report.designated = cand
                report.designated_index = index
                break
            report.lost_designated.append(cand)
        if index is None:
            raise RecoveryAborted("no designated node could supply verified state")
        self.write_index = index

        # Bring the rest of the new configuration to the same state.
        self._reconfig_done: set[str] = set()
        self._reconfig_wake = self.env.event()
        for m in peers:
            self.send(m, WireMessage(MsgType.RECONFIG, ballot, index, 0, 0, conf.encode()))
        deadline = self.env.now + self.settings.reply_timeout * 4
        while set(peers) - self._reconfig_done and self.env.now < deadline and self.up:
            self._reconfig_wake = self.env.event()
            yield self._reconfig_wake | self.env.timeout(deadline - self.env.now)
        if set(peers) - self._reconfig_done:
            raise RecoveryAborted(f"members {sorted(set(peers) - self._reconfig_done)} did not reconfigure")
        if self.seen_ballot != ballot or not self.up:
            raise RecoveryAborted("fenced by a newer recovery")

        self._become(conf)
        self.service.activate(ballot)
        report.total_time = self.env.now - start
        self.last_recovery = report
        self.hooks.activated(self)
        return report

    def _quorum(self, prior: list[Configuration], answers: dict | None = None) -> bool:
        answers = self._p1bs if answers is None else answers
        for c in prior:
            if not any(m in answers for m in c.members):
                return False
        latest = prior[-1]
        return sum(m in answers for m in latest.members) >= latest.n - latest.f

    def _repair_from(self, source: str, ballot: int, report: RecoveryReport):
        """Copy hashes from ``source`` and fix every local page that fails them.

        Returns the source's write index, or None if it stopped answering
        or sent a page that does not verify.
        """
        t0 = self.env.now
        ev = self._expect(MsgType.HASH_RESP)
        self.send(source, WireMessage(MsgType.HASH_REQ, ballot))
        got = yield from self._await(ev, self.settings.reply_timeout)
        if got is None or got[0] != source:
            return None
        _, resp = got
        n = self.settings.num_blocks
        if len(resp.payload) != n * HASH_SIZE:
            return None
        leaves = [resp.payload[i * HASH_SIZE : (i + 1) * HASH_SIZE] for i in range(n)]
        self.hashes.load(leaves)
        report.hash_bytes += len(resp.payload)
        report.hash_time += self.env.now - t0

        window = max(1, self.settings.scan_window)
        for lo in range(0, n, window):
            blocks = range(lo, min(lo + window, n))
            reads = [self.disk.submit(BlockIO.read(b)) for b in blocks]
            yield self.env.all_of(reads)
            for b, rd in zip(blocks, reads):
                report.pages_verified += 1
                try:
                    self.cipher.open(b, rd.value, leaves[b])
                    continue
                except IntegrityFault:
                    pass
                ev = self._expect(MsgType.PAGE_RESP, b)
                self.send(source, WireMessage(MsgType.PAGE_REQ, ballot, 0, b))
                got = yield from self._await(ev, self.settings.reply_timeout)
                if got is None:
                    return None
                page = got[1].payload
                try:
                    self.cipher.open(b, page, leaves[b])
                except IntegrityFault:
                    return None
                yield self.disk.submit(BlockIO.put(b, page, _FUA))
                report.pages_repaired += 1
                report.repaired_blocks.append(b)
        return resp.write_index

    def on_reconfig(self, src: str, msg: WireMessage) -> None:
        if msg.payload == DONE:
            done = getattr(self, "_reconfig_done", None)
            if done is not None and msg.ballot == getattr(self, "_recovery_ballot", None):
                done.add(src)
                if not self._reconfig_wake.triggered:
                    self._reconfig_wake.succeed()
            return
        self.raise_seen(msg.ballot)
        self.stop_serving("reconfigured")
        self.env.process(self._join(src, msg))

    def _join(self, src: str, msg: WireMessage):
        conf = Configuration.decode(msg.payload)
        yield from self.drained()
        report = RecoveryReport(node=self.id, ballot=msg.ballot)
        index = yield from self._repair_from(src, msg.ballot, report)
        if index is None or self.seen_ballot != msg.ballot or not self.up:
            return
        self.write_index = index
        self._become(conf)
        self.last_recovery = report
        self.send(src, WireMessage(MsgType.RECONFIG, msg.ballot, index, 0, 0, DONE))


from .block_model import Sync  # noqa: E402

_FUA = Sync.FUA
