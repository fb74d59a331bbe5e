"""Write and read interception on the active primary."""

from __future__ import annotations

import simpy

from .block_model import Sync
from .storage import BlockIO, IntegrityFault
from .transport import MsgType, WireMessage


class PrimaryRole:
    # Populated by NodeBase / Node.
    ack_watermark: dict[str, int]

    def _init_primary(self) -> None:
        self.ack_watermark = {b: self.write_index for b in self.conf.backups}
        self._sync_waiters: list[tuple[int, simpy.Event]] = []
        self.serving = True
        self.replicated: list[int] = []  # write indices in hand-off order

    def _require_primary(self) -> None:
        from .node import Halted, NotActive, Role

        if not self.up:
            raise Halted(f"{self.id} is down")
        if self.role is not Role.PRIMARY or not self.active or not self.serving:
            raise NotActive(f"{self.id} is not an active primary")

    # -- writes

    def handle_write(self, block: int, payload: bytes, sync: Sync = Sync.NONE) -> simpy.Event:
        """Start a write; the returned event fires when the write may be acknowledged."""
        self._require_primary()
        sync = Sync(sync)
        # Critical section: everything up to the gate runs without yielding.
        index = self.write_index + 1
        ct, leaf = self.cipher.seal(block, index, self.ballot, payload)
        try:
            self.hashes.put(block, leaf)
        except IntegrityFault as exc:
            self.halt(str(exc))
            raise self._halted_error(exc) from None
        self.write_index = index
        msg = WireMessage(MsgType.WRITE_REPL, self.ballot, index, block, int(sync), ct + leaf)
        for backup in self.conf.backups:
            self.send(backup, msg)
        self.replicated.append(index)

        landed = self.env.event()
        entry = None

        def start() -> None:
            ev = self.disk.submit(BlockIO.put(block, ct, sync))
            ev.callbacks.append(lambda _ev: self._gate_done(entry, landed))

        entry = self.gate.submit(block, start, tag=("W", index))
        waits = [landed]
        if sync.persistent and self.conf.f > 0:
            acked = self.env.event()
            self._sync_waiters.append((index, acked))
            waits.append(acked)
            self._release_sync()
        return self._finish(waits, None)

    def _gate_done(self, entry, landed: simpy.Event) -> None:
        if self.up:
            self.gate.complete(entry)
        landed.succeed()

    def _finish(self, waits: list[simpy.Event], value: object) -> simpy.Event:
        done = self.env.event()
        service = self._service_epoch

        def fire(_ev) -> None:
            if self.up and self.serving and self._service_epoch == service:
                done.succeed(value() if callable(value) else value)

        self.env.all_of(waits).callbacks.append(fire)
        return done

    # -- reads

    def handle_read(self, block: int) -> simpy.Event:
        """Start a read; the returned event fires with the verified plaintext."""
        self._require_primary()
        try:
            # The leaf current at the critical section is the one matching
            # the page this read will see: the gate orders it after every
            # earlier write to the block and before every later one.
            leaf = self.hashes.get(block)
        except IntegrityFault as exc:
            self.halt(str(exc))
            raise self._halted_error(exc) from None
        done = self.env.event()
        service = self._service_epoch
        entry = None

        def start() -> None:
            ev = self.disk.submit(BlockIO.read(block))
            ev.callbacks.append(lambda ev: landed(ev.value))

        def landed(page: bytes) -> None:
            if not self.up:
                return
            self.gate.complete(entry)
            if not self.serving or self._service_epoch != service:
                return
            try:
                plain = self.cipher.open(block, page, leaf)
            except IntegrityFault as exc:
                self.halt(str(exc))
                return
            done.succeed(plain)

        entry = self.gate.submit(block, start, tag=("R", block))
        return done

    # -- acknowledgments

    def on_ack(self, src: str, msg: WireMessage) -> None:
        if src not in self.ack_watermark:
            return
        if msg.write_index > self.ack_watermark[src]:
            self.ack_watermark[src] = msg.write_index
            self._release_sync()

    def sync_threshold(self) -> int:
        """Highest index that at least f backups have acknowledged."""
        f = self.conf.f
        if f == 0:
            return self.write_index
        marks = sorted(self.ack_watermark.values(), reverse=True)
        if len(marks) < f:
            return 0
        t = marks[f - 1]
        if self.mutant("ack-off-by-one"):
            t += 1
        return t

    def _release_sync(self) -> None:
        t = self.sync_threshold()
        keep = []
        for index, ev in self._sync_waiters:
            if index <= t:
                ev.succeed()
            else:
                keep.append((index, ev))
        self._sync_waiters = keep

    # -- stopping

    def stop_serving(self, why: str) -> None:
        """Abandon every outstanding application operation."""
        if getattr(self, "serving", False):
            self.serving = False
            self._service_epoch += 1
            self._sync_waiters = []
            self.hooks.stopped_serving(self, why)

    def halt(self, why: str) -> None:
        """Integrity fault: stop serving and take the machine down."""
        self.halt_reason = why
        self.stop_serving(why)
        self.hooks.halted(self, why)

    def _halted_error(self, exc: Exception):
        from .node import Halted

        return Halted(str(exc))
