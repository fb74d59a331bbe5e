"""One simulated deployment: nodes, application threads, faults and the trace."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import simpy

from ..block_model import (
    Budget,
    History,
    Kind,
    SizeLimitExceeded,
    Sync,
    check_crash_consistency,
    crash,
    is_durable_cut,
    read_inv,
    read_res,
    write_inv,
    write_res,
)
from ..node import Halted, Hooks, Machine, Node, NotActive, Role, Settings, new_disk
from ..recovery import InsufficientQuorum, RecoveryAborted, RecoveryReport
from ..storage import CipherContext
from ..transport import ConfigError, ConfigService, Configuration, LinkRule, Network
from .faults import Fault
from .workload import FSYNC, IoOp, generate

EXIT_PASS, EXIT_INCONSISTENT, EXIT_HALTED, EXIT_ABORTED, EXIT_BUDGET = range(5)
VERDICTS = {
    EXIT_PASS: "PASS",
    EXIT_INCONSISTENT: "INCONSISTENT",
    EXIT_HALTED: "HALT-DETECTED",
    EXIT_ABORTED: "RECOVERY-ABORTED",
    EXIT_BUDGET: "BUDGET-EXCEEDED",
}


@dataclass
class RunParams:
    nodes: int = 2
    f: int = 1
    layers: int = 0
    blocks: int = 64
    block_size: int = 4096
    threads: int = 3
    ops: int = 10
    fsync_every: int = 0
    workload: str = "rand"
    seed: int = 0
    faults: list[Fault] = field(default_factory=list)
    mutants: frozenset[str] = frozenset()
    disk_latency: float = 1e-4
    disk_jitter: float = 5e-5
    net_latency: float = 5e-4
    think_time: float = 2e-4
    restart_delay: float = 1e-3
    time_limit: float = 60.0
    probe: bool = True
    sweep: bool = True
    pauses: tuple[float, ...] = ()  # simulated times of backup durable-cut spot checks
    check: bool = True
    budget: int = 2_000_000
    program: list[list[IoOp]] | None = None  # overrides the generated workload


def encode_value(value: str, block_size: int) -> bytes:
    raw = value.encode()
    if len(raw) > block_size:
        raise ValueError("value longer than a block")
    return raw.ljust(block_size, b"\0")


def decode_value(page: bytes) -> str:
    return page.rstrip(b"\0").decode(errors="replace") or "0"


@dataclass
class WriteRecord:
    pos: int  # trace position of the invocation
    era: int
    thread: str
    block: int
    value: str
    sync: Sync
    index: int | None = None  # primary write index, None if never handed to a primary
    done: int | None = None  # trace position of the response


@dataclass
class RunResult:
    params: RunParams
    history: History
    exit_code: int
    verdict: str
    counters: dict[str, object]
    recoveries: list[RecoveryReport]
    sync_violations: list[str]
    backup_cut_checks: int
    backup_cut_violations: list[str]
    detail: str = ""
    times: list[float] = field(default_factory=list, repr=False)
    writes: list[WriteRecord] = field(default_factory=list, repr=False)
    setup_len: int = 0

    def report_lines(self) -> list[str]:
        lines = [f"verdict={self.verdict}", f"exit_code={self.exit_code}"]
        lines += [f"{k}={v}" for k, v in self.counters.items()]
        for rep in self.recoveries:
            lines += rep.lines()
        lines.append(f"sync_violations={len(self.sync_violations)}")
        lines.append(f"backup_cut_checks={self.backup_cut_checks}")
        lines.append(f"backup_cut_violations={len(self.backup_cut_violations)}")
        if self.detail:
            lines.append("detail=" + self.detail.replace("\n", " | "))
        return lines


class Cluster:
    def __init__(self, params: RunParams):
        if not params.f + 1 <= params.nodes <= 2 * params.f + 1:
            raise ConfigError(f"need f+1 <= N <= 2f+1, got N={params.nodes} f={params.f}")
        self.p = params
        self.env = simpy.Environment()
        self.rng = random.Random(params.seed)
        self.settings = Settings(
            num_blocks=params.blocks,
            block_size=params.block_size,
            disk_layers=params.layers,
            mutants=frozenset(params.mutants),
        )
        self.net = Network(self.env, latency=params.net_latency, rng=random.Random(self.rng.getrandbits(64)))
        self.service = ConfigService()
        self.cipher = CipherContext(self.rng.randbytes(32))
        self.hooks = Hooks(halted=self._on_halt, stopped_serving=self._on_stop, activated=self._on_activated)
        self.machines: dict[str, Machine] = {}
        for i in range(params.nodes):
            name = f"m{i}"
            disk = new_disk(self.env, self.settings, params.disk_latency, params.disk_jitter,
                            random.Random(self.rng.getrandbits(64)))
            self.machines[name] = Machine(name, disk)
            Node(self.env, self.machines[name], self.net, self.cipher, self.service, self.settings, self.hooks)
        members = tuple(m.node.id for m in self.machines.values())
        conf = Configuration(0, members, params.f)
        for m in self.machines.values():
            m.node.initialize(conf)
        self.primary: Node | None = self.machines["m0"].node

        self.events: list = []
        self.times: list[float] = []
        self.era = 0
        self.era_start = 0
        self.writes: list[WriteRecord] = []
        self.by_index: dict[int, dict[int, WriteRecord]] = {0: {}}
        self.available = self.env.event()
        self.available.succeed()
        self.era_over = self.env.event()
        self.finished = self.env.event()
        self.outcome: int | None = None
        self.detail = ""
        self.snapshots: dict[str, object] = {}
        self.recoveries: list[RecoveryReport] = []
        self.recovering: set[str] = set()
        self.sync_violations: list[str] = []
        self.backup_cut_checks = 0
        self.backup_cut_violations: list[str] = []
        self.counters = {"crashes": 0, "halts": 0, "restarts": 0, "faults_fired": 0, "stalled": 0, "abandoned": 0}
        self._faults: dict[int, list[Fault]] = {}
        self.setup_len = 0
        self._value_counter = 0

    # -- trace

    def _record(self, ev) -> int:
        pos = len(self.events)
        self.events.append(ev)
        self.times.append(self.env.now)
        for fault in self._faults.pop(len(self.events), ()):
            self._fire(fault)
        return pos

    def _end_era(self, why: str) -> None:
        if not self.available.triggered:
            return  # already between eras
        self.counters["crashes"] += 1
        self.primary = None
        self.available = self.env.event()
        old = self.era_over
        self.era_over = self.env.event()
        self.era += 1
        self.by_index[self.era] = {}
        self._record(crash())
        self.era_start = len(self.events)
        old.succeed(why)

    # -- node callbacks

    def _on_stop(self, node: Node, why: str) -> None:
        if node is self.primary:
            self._end_era(why)

    def _on_halt(self, node: Node, why: str) -> None:
        self.counters["halts"] += 1
        self.detail = f"{node.id} halted: {why}"
        if self.p.f == 0 or self.p.nodes == 1:
            self._finish(EXIT_HALTED)
            return
        self.env.process(self._restart(node.machine, halt=True))

    def _on_activated(self, node: Node) -> None:
        if node.role is not Role.PRIMARY:
            return
        if self.primary is not None and self.primary is not node:
            self.primary.stop_serving("superseded")
        self.recoveries.append(node.last_recovery)
        self.primary = node
        self.env.process(self._resume(node))

    def _resume(self, node: Node):
        if self.p.probe:
            yield from self._probe(node, f"p{len(self.recoveries)}")
        if self.primary is node and not self.available.triggered and self.outcome is None:
            self.available.succeed()

    # -- faults

    def _fire(self, fault: Fault) -> None:
        self.counters["faults_fired"] += 1
        a = fault.action
        if a in ("crash", "snapshot", "rollback", "corrupt_page"):
            machine = self.machines.get(fault.target)
            if machine is None:
                return
            if a == "snapshot":
                self.snapshots[machine.name] = machine.disk.snapshot()
            elif a == "crash":
                self._power_fail(machine)
                self.env.process(self._restart(machine))
            elif a == "corrupt_page":
                page = bytearray(machine.disk.raw_read(fault.block % self.p.blocks))
                page[self.rng.randrange(len(page))] ^= 1 << self.rng.randrange(8)
                machine.disk.raw_write(fault.block % self.p.blocks, bytes(page))
            else:
                image = self.snapshots.get(machine.name)
                if fault.mode == "offline":
                    self._power_fail(machine)
                    if image is not None:
                        machine.disk.restore(image)
                    self.env.process(self._restart(machine))
                elif image is not None:
                    machine.disk.restore(image)
            return
        if a == "delay":
            self.net.set_delay(fault.target, fault.peer, fault.seconds)
            return
        action = "delay" if a == "hold" else a
        self.net.add_rule(fault.target, fault.peer, LinkRule(action, fault.count, fault.seconds, fault.types))

    def _power_fail(self, machine: Machine) -> None:
        node = machine.node
        if node is not None and node.up:
            was_primary = node is self.primary
            node.crash()
            machine.disk.crash(random.Random(self.rng.getrandbits(64)))
            if was_primary:
                self._end_era("power failure")

    def _restart(self, machine: Machine, halt: bool = False):
        if machine.name in self.recovering:
            return
        self.recovering.add(machine.name)
        if halt:
            self._power_fail(machine)
        yield self.env.timeout(self.p.restart_delay)
        self.counters["restarts"] += 1
        node = Node(self.env, machine, self.net, self.cipher, self.service, self.settings, self.hooks)
        latest = self.service.all_conf[self.service.activated]
        peers = []
        for member in latest.members:
            host = self.machines[member.split(".", 1)[0]]
            if host is not machine and host.node is not None and host.node.up:
                peers.append(host.node.id)
        try:
            yield self.env.process(node.recover(tuple(peers), self.p.f))
        except (InsufficientQuorum, RecoveryAborted, ConfigError) as exc:
            self.detail = f"{node.id}: {exc}"
            self._finish(EXIT_ABORTED)
        finally:
            self.recovering.discard(machine.name)

    # -- application

    def _value(self, thread: str) -> str:
        self._value_counter += 1
        return f"{thread}.{self._value_counter}"

    def _do(self, thread: str, op: IoOp):
        """Issue one op; returns True if it completed, False if abandoned."""
        yield self.available
        node, era, over = self.primary, self.era, self.era_over
        if op.write:
            value = self._value(thread)
            rec = WriteRecord(len(self.events), era, thread, op.block, value, op.sync)
            self.writes.append(rec)
            self._record(write_inv(thread, op.block, value, op.sync))
        else:
            self._record(read_inv(thread, op.block))
        if self.era != era or node is not self.primary:
            return None
        try:
            if op.write:
                ev = node.handle_write(op.block, encode_value(value, self.p.block_size), op.sync)
                rec.index = node.write_index
                self.by_index[era][rec.index] = rec
            else:
                ev = node.handle_read(op.block)
        except (NotActive, Halted):
            self.counters["abandoned"] += 1
            return None
        got = yield ev | over
        if ev not in got or self.era != era:
            self.counters["abandoned"] += 1
            return None
        if op.write:
            rec.done = self._record(write_res(thread, op.block))
            return True
        value = decode_value(got[ev])
        self._record(read_res(thread, op.block, value))
        return value

    def _thread(self, name: str, ops: list[IoOp]):
        for op in ops:
            yield from self._do(name, op)
            if self.outcome is not None:
                return
            if self.p.think_time:
                yield self.env.timeout(self.p.think_time)

    def _probe(self, node: Node, name: str):
        """Read every block right after recovery, before the application resumes."""
        era, over = self.era, self.era_over
        for b in range(self.p.blocks):
            self._record(read_inv(name, b))
            try:
                ev = node.handle_read(b)
            except (NotActive, Halted):
                return
            got = yield ev | over
            if ev not in got or self.era != era:
                return
            value = decode_value(got[ev])
            self._record(read_res(name, b, value))
            self._check_sync_durable(b, value, name)

    def _check_sync_durable(self, block: int, value: str, who: str) -> None:
        """A completed flagged write must not be lost: the read may not
        return any value that was superseded before that write began."""
        crash_pos = self.era_start - 1
        latest = None
        for w in self.writes:
            if w.block == block and w.sync and w.done is not None and w.done < crash_pos:
                if latest is None or w.done > latest.done:
                    latest = w
        if latest is None:
            return
        stale = {w.value for w in self.writes if w.block == block and w.done is not None and w.done < latest.pos}
        if value in stale:
            self.sync_violations.append(
                f"{who}: block {block} read {value} after flagged write {latest.value} completed at {latest.done}"
            )

    def _setup(self):
        """Write every block once; the last write is flagged so all of it is durable."""
        n = self.p.blocks
        for b in range(n):
            op = IoOp(True, b, FSYNC if b == n - 1 else Sync.NONE)
            yield from self._do("s", op)
        yield from self._settle()

    def _settle(self):
        # Let replication drain so setup is on every node before faults begin.
        while True:
            if self.outcome is not None:
                return
            nodes = [m.node for m in self.machines.values() if m.node and m.node.up]
            if all(n.gate.idle for n in nodes) and len({n.write_index for n in nodes}) <= 1:
                return
            yield self.env.timeout(self.p.net_latency)

    def _sweep(self):
        for b in range(self.p.blocks):
            yield from self._do("z", IoOp(False, b))
            if self.outcome is not None:
                return

    def _pauses(self):
        for at in sorted(self.p.pauses):
            if at > self.env.now:
                yield self.env.timeout(at - self.env.now)
            if self.outcome is not None:
                return
            self.backup_cut_check()

    def backup_cut_check(self) -> None:
        """Each backup's admitted writes of this era must form a durable cut of it."""
        node = self.primary
        if node is None or not self.available.triggered or node.conf is None:
            return
        # Reads add no write-to-write ordering that the writes' own timing
        # does not already imply, so the cut is judged on the era's writes.
        keep = [i for i in range(self.era_start, len(self.events))
                if self.events[i].kind in (Kind.WRITE_INV, Kind.WRITE_RES)]
        era_hist = History.from_events(self.events[i] for i in keep)
        local = {pos: k for k, pos in enumerate(keep)}
        index_map = self.by_index[self.era]
        for member in node.conf.backups:
            backup = self.machines[member.split(".", 1)[0]].node
            if backup is None or not backup.up or backup.id != member or backup.role is not Role.BACKUP:
                continue
            kept = set()
            unknown = False
            for idx in backup.admitted:
                rec = index_map.get(idx)
                if rec is None:
                    unknown = True
                    break
                kept.add(local[rec.pos])
            if unknown:
                continue
            self.backup_cut_checks += 1
            if not is_durable_cut(era_hist, kept):
                self.backup_cut_violations.append(
                    f"t={self.env.now:.6f} {backup.id} admitted {sorted(backup.admitted)} is not a durable cut"
                )

    def _main(self):
        yield from self._setup()
        # Fault steps count workload events; rollbacks default to this image.
        self.setup_len = len(self.events)
        for fault in self.p.faults:
            self._faults.setdefault(self.setup_len + fault.step, []).append(fault)
        for name, m in self.machines.items():
            self.snapshots[name] = m.disk.snapshot()
        for fault in self._faults.pop(self.setup_len, ()):
            self._fire(fault)
        program = self.p.program
        if program is None:
            program = generate(self.p.workload, self.p.blocks, self.p.threads, self.p.ops,
                               self.p.fsync_every, random.Random(self.rng.getrandbits(64)))
        procs = [self.env.process(self._thread(f"t{i}", ops)) for i, ops in enumerate(program)]
        if self.p.pauses:
            self.env.process(self._pauses())
        yield self.env.all_of(procs)
        if self.outcome is None and self.p.sweep:
            yield from self._sweep()
        self._finish(EXIT_PASS)

    def _finish(self, code: int) -> None:
        if self.outcome is None:
            self.outcome = code
        if not self.finished.triggered:
            self.finished.succeed()

    # -- driving

    def run(self) -> RunResult:
        self.env.process(self._main())
        self.env.run(until=self.finished | self.env.timeout(self.p.time_limit))
        if not self.finished.triggered:
            self.counters["stalled"] = 1
            self._finish(EXIT_PASS)
        history = History.from_events(self.events)
        code = self.outcome
        verdict_text = ""
        self.counters["events"] = len(history)
        self.counters["eras"] = self.era + 1
        self.counters["sim_time"] = f"{self.env.now:.6f}"
        self.counters["bad_frames"] = sum(m.node.stats.bad_frames for m in self.machines.values() if m.node)
        if self.p.check and code in (EXIT_PASS, EXIT_HALTED, EXIT_ABORTED):
            budget = Budget(self.p.budget)
            try:
                verdict = check_crash_consistency(history, budget)
            except SizeLimitExceeded:
                code = EXIT_BUDGET
            else:
                self.counters["checker_steps"] = verdict.explored
                if not verdict.consistent:
                    code = EXIT_INCONSISTENT
                    verdict_text = verdict.narrative()
        if code == EXIT_PASS and self.sync_violations:
            code = EXIT_INCONSISTENT
            verdict_text = self.sync_violations[0]
        detail = "\n".join(x for x in (self.detail, verdict_text) if x)
        return RunResult(self.p, history, code, VERDICTS[code], self.counters, [r for r in self.recoveries if r],
                         self.sync_violations, self.backup_cut_checks, self.backup_cut_violations, detail,
                         self.times, self.writes, self.setup_len)


def run(params: RunParams) -> RunResult:
    return Cluster(params).run()
