"""Seeded multi-run campaigns that exercise the protocol against the checker."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field

import simpy

from ..block_model import Sync
from ..node import MUTANTS, Hooks, Machine, Node, Settings, new_disk
from ..storage import CipherContext
from ..transport import ConfigService, Configuration, MsgType, Network, WireMessage
from .cluster import EXIT_ABORTED, EXIT_BUDGET, EXIT_HALTED, EXIT_INCONSISTENT, EXIT_PASS, RunParams, RunResult, run
from .faults import Fault
from .workload import FSYNC, SHAPES, IoOp


@dataclass
class CampaignSummary:
    name: str
    runs: int = 0
    outcomes: dict[str, int] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    sync_violations: int = 0
    backup_cut_checks: int = 0
    backup_cut_violations: int = 0
    notes: dict[str, object] = field(default_factory=dict)

    def add(self, res: RunResult, label: str, failed: bool) -> None:
        self.runs += 1
        self.outcomes[res.verdict] = self.outcomes.get(res.verdict, 0) + 1
        self.sync_violations += len(res.sync_violations)
        self.backup_cut_checks += res.backup_cut_checks
        self.backup_cut_violations += len(res.backup_cut_violations)
        if failed:
            self.failures.append(f"{label}: {res.verdict} {res.detail}".strip())

    def lines(self) -> list[str]:
        out = [f"campaign={self.name}", f"runs={self.runs}", f"failures={len(self.failures)}"]
        out += [f"outcome.{k}={v}" for k, v in sorted(self.outcomes.items())]
        out += [
            f"sync_violations={self.sync_violations}",
            f"backup_cut_checks={self.backup_cut_checks}",
            f"backup_cut_violations={self.backup_cut_violations}",
        ]
        out += [f"{k}={v}" for k, v in self.notes.items()]
        out += [f"failure.{i}={f}" for i, f in enumerate(self.failures[:10])]
        return out


def is_finding(res: RunResult) -> bool:
    """Safety findings; aborts, halts and budget overruns are not."""
    return res.exit_code == EXIT_INCONSISTENT or bool(res.sync_violations) or bool(res.backup_cut_violations)


# ---------------------------------------------------------------------------
# End-to-end crash plus rollback runs


def crash_rollback_params(seed: int, cut_pauses: int = 0) -> RunParams:
    """One N=2, f=1 run with a single crash and rollback of a random machine."""
    rng = random.Random(seed)
    threads = rng.randint(2, 3)
    ops = rng.randint(6, 12)
    victim = rng.choice(("m0", "m0", "m1"))
    step = rng.randrange(0, threads * ops * 2)
    faults = [Fault(step, "rollback", victim, mode="offline")]
    pauses = tuple(sorted(rng.uniform(0.0, 0.02) for _ in range(cut_pauses)))
    # Setup takes about one disk round per block; pause during the workload.
    pauses = tuple(16 * 2.5e-4 + t for t in pauses)
    return RunParams(
        nodes=2,
        f=1,
        blocks=16,
        block_size=512,
        threads=threads,
        ops=ops,
        fsync_every=rng.choice((0, 2, 3, 4)),
        workload=rng.choice(SHAPES),
        seed=seed,
        faults=faults,
        pauses=pauses,
    )


def crash_rollback_campaign(runs: int = 1000, seed: int = 0, cut_every: int = 5) -> CampaignSummary:
    summary = CampaignSummary("crash-rollback")
    recovered = 0
    for i in range(runs):
        params = crash_rollback_params(seed + i, cut_pauses=3 if cut_every and i % cut_every == 0 else 0)
        res = run(params)
        recovered += bool(res.recoveries)
        summary.add(res, f"seed={seed + i}", res.exit_code != EXIT_PASS or is_finding(res))
    summary.notes["recovered_runs"] = recovered
    return summary


# ---------------------------------------------------------------------------
# Detection mode


def detection_campaign(runs: int = 200, seed: int = 0) -> CampaignSummary:
    """Single node, f=0: online rollbacks must end in a halt, never a stale read."""
    summary = CampaignSummary("detection")
    for i in range(runs):
        rng = random.Random(seed + i)
        layers = rng.choice((0, 1, 2))
        params = RunParams(
            nodes=1,
            f=0,
            layers=layers,
            blocks=160 if layers == 2 else 16,  # two disk layers need a three-layer tree
            block_size=512,
            threads=2,
            ops=10,
            workload=rng.choice(SHAPES),
            seed=seed + i,
            faults=[Fault(rng.randint(36, 40), "rollback", "m0", mode="online")],  # late: the sweep reads what it reverted
        )
        res = run(params)
        summary.add(res, f"seed={seed + i}", res.exit_code != EXIT_HALTED)
    return summary


def abort_run(seed: int = 0) -> RunResult:
    """Single node, f=0, rolled back while down: no quorum can vouch for it."""
    return run(RunParams(nodes=1, f=0, blocks=16, block_size=512, threads=2, ops=6, seed=seed,
                         faults=[Fault(4, "rollback", "m0", mode="offline")]))


# ---------------------------------------------------------------------------
# Split-brain races


@dataclass
class RaceResult:
    seed: int
    stale_sent: int
    stale_delivered_after_fence: int
    accepted_after_fence: int
    recovered: bool


def split_brain_race(seed: int) -> RaceResult:
    """A new node takes over while the old primary keeps sending.

    The old primary either is fenced by P1a and then keeps emitting forged
    but correctly authenticated data messages at its old ballot, or never
    sees the P1a and keeps serving. Either way no fenced node may accept
    its data messages.
    """
    rng = random.Random(seed)
    env = simpy.Environment()
    n = rng.choice((2, 3))
    settings = Settings(num_blocks=8, block_size=256)
    net = Network(env, latency=5e-4, rng=random.Random(rng.getrandbits(64)))
    service = ConfigService()
    cipher = CipherContext(rng.randbytes(32))
    machines = [Machine(f"m{i}", new_disk(env, settings, 1e-4, 0.0, random.Random(i))) for i in range(n + 1)]
    nodes = [Node(env, m, net, cipher, service, settings, Hooks()) for m in machines[:n]]
    conf = Configuration(0, tuple(x.id for x in nodes), 1)
    for x in nodes:
        x.initialize(conf)
    old = nodes[0]
    spare = machines[n]
    p1a_to_old_dropped = rng.random() < 0.5
    if p1a_to_old_dropped:
        net.add_rule(spare.name, old.machine.name, _drop_rule(MsgType.P1A))
    counts = {"sent": 0}
    result = {}

    def app():
        i = 0
        while env.now < 0.03:
            i += 1
            if old.serving:
                try:
                    old.handle_write(rng.randrange(8), bytes([i % 256]) * 256, FSYNC if i % 3 == 0 else Sync.NONE)
                except Exception:
                    pass
            else:
                # Fenced: keep emitting replication traffic anyway.
                msg = WireMessage(MsgType.WRITE_REPL, old.ballot, old.write_index + i, rng.randrange(8), 0, bytes(288))
                for b in conf.backups:
                    old.send(b, msg)
            counts["sent"] += 1
            yield env.timeout(rng.uniform(1e-4, 1e-3))

    def takeover():
        yield env.timeout(rng.uniform(0.002, 0.01))
        new = Node(env, spare, net, cipher, service, settings, Hooks())
        peers = tuple(x.id for x in nodes[1:])
        try:
            yield env.process(new.recover(peers, 1))
            result["ok"] = True
        except Exception:
            result["ok"] = False

    env.process(app())
    env.process(takeover())
    env.run(until=0.04)

    delivered = accepted = 0
    fenced_nodes = [x for x in nodes[1:] if x.stats.fenced]
    for x in fenced_nodes:
        t_fence = x.stats.fenced[0][0]
        accepted += sum(1 for (t, src, _b, _i) in x.stats.accepted_data if src == old.id and t >= t_fence)
    for t, src, dst, mtype, status in net.log:
        if src == old.id and mtype in (int(MsgType.WRITE_REPL), int(MsgType.ACK)):
            target = next((x for x in fenced_nodes if x.id == dst), None)
            if target is not None and t >= target.stats.fenced[0][0]:
                delivered += 1
    return RaceResult(seed, counts["sent"], delivered, accepted, result.get("ok", False))


def _drop_rule(mtype: MsgType):
    from ..transport import LinkRule

    return LinkRule("drop", None, 0.0, frozenset({mtype}))


def split_brain_campaign(races: int = 100, seed: int = 0) -> tuple[CampaignSummary, list[RaceResult]]:
    summary = CampaignSummary("split-brain")
    results = []
    for i in range(races):
        r = split_brain_race(seed + i)
        results.append(r)
        summary.runs += 1
        if r.accepted_after_fence:
            summary.failures.append(f"seed={r.seed}: {r.accepted_after_fence} stale data messages accepted")
    summary.notes["stale_after_fence"] = sum(r.stale_delivered_after_fence for r in results)
    summary.notes["accepted_after_fence"] = sum(r.accepted_after_fence for r in results)
    summary.notes["recovered"] = sum(r.recovered for r in results)
    return summary, results


# ---------------------------------------------------------------------------
# Asynchrony


@dataclass
class LatencyStats:
    delay: float
    unflagged: list[float]
    flagged: list[float]

    @property
    def unflagged_mean(self) -> float:
        return sum(self.unflagged) / len(self.unflagged)

    @property
    def flagged_min(self) -> float:
        return min(self.flagged)


def write_latencies(res: RunResult) -> tuple[list[float], list[float]]:
    """Completion latency of every completed workload write, split by flags."""
    plain, flagged = [], []
    for w in res.writes:
        if w.done is None or w.pos < res.setup_len:
            continue
        lat = res.times[w.done] - res.times[w.pos]
        (flagged if w.sync else plain).append(lat)
    return plain, flagged


def asynchrony_run(delay: float, seed: int = 0, ops: int = 40) -> LatencyStats:
    """Sequential writes, every 4th flagged, with a slowed primary-to-backup link."""
    faults = [Fault(0, "delay", "m0", "m1", seconds=delay)] if delay else []
    params = RunParams(nodes=2, f=1, blocks=64, block_size=512, threads=1, ops=ops, fsync_every=4,
                       workload="seq", seed=seed, faults=faults, probe=False, sweep=False)
    params.program = [[IoOp(True, i % 64, FSYNC if (i + 1) % 4 == 0 else Sync.NONE) for i in range(ops)]]
    res = run(params)
    plain, flagged = write_latencies(res)
    return LatencyStats(delay, plain, flagged)


# ---------------------------------------------------------------------------
# Fuzzing


def random_schedule(rng: random.Random, horizon: int, nodes: int) -> list[Fault]:
    machines = [f"m{i}" for i in range(nodes)]
    faults = []
    if rng.random() < 0.4:
        faults.append(Fault(rng.randrange(horizon // 2 + 1), "snapshot", rng.choice(machines)))
    for _ in range(rng.randint(0, 2)):
        src, dst = rng.sample(machines, 2) if nodes > 1 else (machines[0], machines[0])
        kind = rng.choice(("hold", "hold", "dup", "corrupt", "delay"))
        types = rng.choice((None, frozenset({MsgType.WRITE_REPL}), frozenset({MsgType.ACK})))
        if kind == "delay":
            faults.append(Fault(rng.randrange(horizon), kind, src, dst, seconds=rng.uniform(1e-4, 3e-3), count=None))
        else:
            faults.append(Fault(rng.randrange(horizon), kind, src, dst, seconds=rng.uniform(5e-4, 5e-3),
                                count=rng.randint(1, 3), types=types))
    action = rng.choice(("crash", "rollback-offline", "rollback-offline", "rollback-online", "corrupt_page"))
    step = rng.randrange(horizon)
    victim = rng.choice(machines[:1] * 2 + machines)
    if action == "crash":
        faults.append(Fault(step, "crash", victim))
    elif action == "corrupt_page":
        faults.append(Fault(step, "corrupt_page", victim, block=rng.randrange(16)))
    else:
        faults.append(Fault(step, "rollback", victim, mode=action.split("-")[1]))
    return sorted(faults, key=lambda f: f.step)


def fuzz_params(seed: int, mutants: frozenset[str] = frozenset(), layers: int | None = None) -> RunParams:
    rng = random.Random(seed)
    threads = rng.randint(2, 3)
    ops = rng.randint(6, 12)
    return RunParams(
        nodes=2,
        f=1,
        layers=rng.choice((0, 1)) if layers is None else layers,
        blocks=16,
        block_size=512,
        threads=threads,
        ops=ops,
        fsync_every=rng.choice((0, 2, 3)),
        workload=rng.choice(SHAPES),
        seed=seed,
        faults=random_schedule(rng, threads * ops * 2, 2),
        mutants=mutants,
        pauses=tuple(sorted(4e-3 + rng.uniform(0, 0.01) for _ in range(3))),
        time_limit=5.0,
    )


def fuzz_campaign(schedules: int = 500, seed: int = 0, mutants: frozenset[str] = frozenset(),
                  layers: int | None = None, stop_on_finding: bool = False) -> CampaignSummary:
    summary = CampaignSummary("fuzz" + ("[" + ",".join(sorted(mutants)) + "]" if mutants else ""))
    for i in range(schedules):
        res = run(fuzz_params(seed + i, mutants, layers))
        found = is_finding(res)
        summary.add(res, f"seed={seed + i}", found)
        if found and "first_finding" not in summary.notes:
            summary.notes["first_finding"] = i
            if stop_on_finding:
                break
    return summary


def mutation_campaign(schedules: int = 500, seed: int = 0) -> dict[str, CampaignSummary]:
    """Each mutant must be caught (at least one finding) within ``schedules``."""
    layers = {"skip-merkle-verify": 1}
    return {m: fuzz_campaign(schedules, seed, frozenset({m}), layers.get(m), stop_on_finding=True) for m in MUTANTS}


# ---------------------------------------------------------------------------
# Small-scope systematic campaign

ALPHABET = ("W0", "W1", "S0", "R0", "R1")


def _io(token: str) -> IoOp:
    kind, block = token[0], int(token[1:])
    if kind == "R":
        return IoOp(False, block)
    return IoOp(True, block, FSYNC if kind == "S" else Sync.NONE)


def templates(max_len: int = 4):
    for n in range(1, max_len + 1):
        yield from itertools.product(ALPHABET, repeat=n)


def ace_params(template: tuple[str, ...], step: int, seed: int = 0) -> RunParams:
    ops = [_io(t) for t in template]
    return RunParams(
        nodes=2,
        f=1,
        blocks=2,
        block_size=64,
        threads=2,
        seed=seed,
        program=[ops, ops[::-1]],
        faults=[Fault(step, "rollback", "m0", mode="offline")],
        think_time=0.0,
    )


def ace_campaign(max_len: int = 4, seed: int = 0, limit: int | None = None) -> CampaignSummary:
    """Every crash point of every template: thread 0 runs it, thread 1 runs it reversed.

    Each crash takes the primary down and rolls its disk back to the state
    right after setup, so recovery has to come from the backup.
    """
    summary = CampaignSummary("ace")
    count = 0
    for tpl in templates(max_len):
        for step in range(0, 4 * len(tpl) + 1):
            res = run(ace_params(tpl, step, seed))
            summary.add(res, f"{' '.join(tpl)} @ {step}", res.exit_code != EXIT_PASS or is_finding(res))
            count += 1
            if limit is not None and count >= limit:
                return summary
    summary.notes["templates"] = sum(1 for _ in templates(max_len))
    return summary


__all__ = [
    "EXIT_ABORTED",
    "EXIT_BUDGET",
    "EXIT_HALTED",
    "CampaignSummary",
    "abort_run",
    "ace_campaign",
    "asynchrony_run",
    "detection_campaign",
    "fuzz_campaign",
    "mutation_campaign",
    "split_brain_campaign",
    "crash_rollback_campaign",
]
