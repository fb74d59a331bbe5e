"""Backup side: admit replicated writes in index order and acknowledge receipt."""

from __future__ import annotations

from .block_model import Sync
from .storage import HASH_SIZE, BlockIO, IntegrityFault
from .transport import MsgType, WireMessage

HELD_LIMIT = 1 << 16


class BackupRole:
    def _init_backup(self) -> None:
        self.held: dict[int, WireMessage] = {}
        self.admitted: list[int] = []  # write indices in admission order
        self.primary_id = self.conf.primary

    def on_write_repl(self, src: str, msg: WireMessage) -> None:
        from .node import Role

        if self.role is not Role.BACKUP or src != self.primary_id:
            return
        flagged = False
        if self.mutant("backup-out-of-order"):
            if msg.write_index in self.admitted or msg.write_index <= self._base_index:
                self.stats.duplicates += 1
                return
            if not self._admit(msg):
                return
            flagged = bool(msg.flags)
        else:
            if msg.write_index <= self.write_index or msg.write_index in self.held:
                self.stats.duplicates += 1
                if msg.flags:
                    self._ack()
                return
            if len(self.held) >= HELD_LIMIT:
                raise OverflowError("reorder buffer full")
            self.held[msg.write_index] = msg
            while self.write_index + 1 in self.held:
                nxt = self.held.pop(self.write_index + 1)
                if not self._admit(nxt):
                    return
                flagged |= bool(nxt.flags)
        if flagged:
            self._ack()

    def _admit(self, msg: WireMessage) -> bool:
        ct, leaf = msg.payload[:-HASH_SIZE], msg.payload[-HASH_SIZE:]
        try:
            self.hashes.put(msg.block, leaf)
        except IntegrityFault as exc:
            self.halt(str(exc))
            return False
        self.write_index = max(self.write_index, msg.write_index)
        self.admitted.append(msg.write_index)
        entry = None

        def start() -> None:
            ev = self.disk.submit(BlockIO.put(msg.block, ct, Sync(msg.flags)))
            ev.callbacks.append(lambda _ev: self.up and self.gate.complete(entry))

        entry = self.gate.submit(msg.block, start, tag=("W", msg.write_index))
        return True

    def _ack(self) -> None:
        self.send(self.primary_id, WireMessage(MsgType.ACK, self.ballot, self.write_index))
