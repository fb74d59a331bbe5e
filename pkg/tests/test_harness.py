"""Workloads, fault schedules, single runs and the command line."""

import random

import pytest

from replidisk.block_model import Sync, format_trace, is_crash_consistent, parse_trace
from replidisk.harness import (
    EXIT_ABORTED,
    EXIT_HALTED,
    EXIT_INCONSISTENT,
    EXIT_PASS,
    Fault,
    RunParams,
    ScheduleError,
    generate,
    parse_schedule,
    run,
)
from replidisk.harness.campaigns import abort_run, ace_params, crash_rollback_params, templates, write_latencies
from replidisk.harness.cli import EXIT_USAGE, main
from replidisk.harness.cluster import decode_value, encode_value
from replidisk.harness.faults import format_schedule, parse_line
from replidisk.harness.workload import FSYNC, file_ops_preset
from replidisk.transport import MsgType

# ---------------------------------------------------------------------------
# Workloads


@pytest.mark.parametrize("shape", ["seq", "rand", "contended"])
def test_workload_shapes_are_deterministic(shape):
    a = generate(shape, 32, 3, 20, 4, random.Random(5))
    b = generate(shape, 32, 3, 20, 4, random.Random(5))
    assert a == b
    assert [len(t) for t in a] == [20, 20, 20]
    for ops in a:
        assert all(0 <= op.block < 32 for op in ops)
        assert all(op.write and op.sync == FSYNC for op in ops[3::4])


def test_seq_threads_stay_in_their_slice():
    ops = generate("seq", 30, 3, 12)
    assert {op.block for op in ops[1]} <= set(range(10, 20))


def test_contended_uses_hot_blocks():
    ops = generate("contended", 64, 4, 50, rng=random.Random(1))
    assert {op.block for t in ops for op in t} <= {0, 1, 2, 3}


def test_unknown_shape():
    with pytest.raises(ValueError):
        generate("zipf", 8, 1, 1)


def test_file_ops_preset_folds_onto_the_disk():
    ops = file_ops_preset(64, repeat=2)
    assert len(ops) == 16
    assert all(0 <= op.block < 64 for op in ops)
    assert sum(op.sync == FSYNC for op in ops) == 2
    assert str(ops[5]) == "W13[FP]"


def test_value_encoding_round_trip():
    page = encode_value("t1.42", 64)
    assert len(page) == 64 and decode_value(page) == "t1.42"
    with pytest.raises(ValueError):
        encode_value("x" * 65, 64)


# ---------------------------------------------------------------------------
# Fault schedules

SCHEDULE = """\
# comment line
0 snapshot m1
3 rollback m0 offline   # trailing comment
5 crash m1
7 corrupt_page m0 4
8 drop m0 m1 2 WRITE_REPL,ACK
9 dup m1 m0 *
10 hold m0 m1 0.002 1 ACK
11 delay m0 m1 0.05
"""


def test_schedule_parses_every_action():
    faults = parse_schedule(SCHEDULE)
    assert [f.action for f in faults] == [
        "snapshot", "rollback", "crash", "corrupt_page", "drop", "dup", "hold", "delay"
    ]
    assert faults[1].mode == "offline"
    assert faults[3].block == 4
    assert faults[4].count == 2 and faults[4].types == {MsgType.WRITE_REPL, MsgType.ACK}
    assert faults[5].count is None and faults[5].types is None
    assert faults[6].seconds == 0.002
    assert faults[7].count is None


def test_schedule_round_trip():
    faults = parse_schedule(SCHEDULE)
    assert parse_schedule(format_schedule(faults)) == faults


@pytest.mark.parametrize(
    "line",
    [
        "x crash m0",
        "-1 crash m0",
        "1 crash",
        "1 explode m0",
        "1 rollback m0 sideways",
        "1 rollback m0",
        "1 corrupt_page m0 four",
        "1 hold m0 m1",
        "1 delay m0 m1 0.1 3",
        "1 drop m0 m1 2 NOPE",
        "1 drop m0 m1 2 ACK extra",
    ],
)
def test_schedule_errors(line):
    with pytest.raises(ScheduleError, match="line 1"):
        parse_line(line)


def test_blank_and_comment_lines():
    assert parse_line("   ") is None
    assert parse_line("# 1 crash m0") is None


# ---------------------------------------------------------------------------
# Single runs


def small(**kw):
    base = dict(blocks=8, block_size=128, threads=2, ops=6)
    base.update(kw)
    return RunParams(**base)


def test_fault_free_run_passes():
    res = run(small(fsync_every=2))
    assert res.exit_code == EXIT_PASS and res.verdict == "PASS"
    assert res.counters["eras"] == 1 and not res.recoveries
    assert is_crash_consistent(res.history)


def test_runs_are_deterministic():
    p = crash_rollback_params(11)
    a, b = run(p), run(crash_rollback_params(11))
    assert format_trace(a.history) == format_trace(b.history)
    assert a.report_lines() == b.report_lines()


def test_crash_rollback_run_recovers_and_stays_consistent():
    res = run(small(faults=[Fault(4, "rollback", "m0", mode="offline")], fsync_every=2))
    assert res.exit_code == EXIT_PASS
    assert res.counters["eras"] == 2 and len(res.recoveries) == 1
    assert not res.sync_violations


def test_backup_restart_fences_the_old_primary():
    # The restarted backup recovers under a new ballot, so the era ends there.
    res = run(small(faults=[Fault(3, "crash", "m1")]))
    assert res.exit_code == EXIT_PASS
    assert res.counters["eras"] == 2 and len(res.recoveries) == 1
    assert not res.sync_violations


def test_trace_rechecks_to_the_same_verdict():
    res = run(crash_rollback_params(3))
    again = parse_trace(format_trace(res.history))
    assert again == res.history
    assert is_crash_consistent(again) == (res.exit_code == EXIT_PASS)


def test_online_rollback_without_replicas_halts():
    p = small(nodes=1, f=0, ops=10, faults=[Fault(30, "rollback", "m0", mode="online")], blocks=16)
    res = run(p)
    assert res.exit_code == EXIT_HALTED


def test_rollback_while_down_without_replicas_aborts():
    assert abort_run().exit_code == EXIT_ABORTED


def test_bad_configuration_is_rejected():
    with pytest.raises(ValueError):
        run(RunParams(nodes=4, f=1))


def test_flag_latency_split():
    p = small(threads=1, ops=8, fsync_every=2, faults=[Fault(0, "delay", "m0", "m1", seconds=0.02)],
              probe=False, sweep=False)
    plain, flagged = write_latencies(run(p))
    assert flagged and min(flagged) >= 0.02
    assert not plain or max(plain) < 0.001


def test_ace_templates_cover_both_threads():
    assert sum(1 for _ in templates(2)) == 5 + 25
    p = ace_params(("W0", "S0"), 3)
    assert p.program[1] == p.program[0][::-1]
    assert p.program[0][1].sync == Sync.FUA | Sync.PREFLUSH


# ---------------------------------------------------------------------------
# Command line

ROLLBACK_TRACE = """0 t1 WI 0 v1 FP
1 t1 WR 0 - -
2 - CR - - -
3 t1 RI 0 - -
4 t1 RR 0 v0 -
"""


def test_cli_check_flags_a_rollback(tmp_path, capsys):
    path = tmp_path / "t.trace"
    path.write_text(ROLLBACK_TRACE)
    assert main(["check", str(path)]) == EXIT_INCONSISTENT
    assert capsys.readouterr().out.startswith("INCONSISTENT")


def test_cli_check_empty_trace(tmp_path, capsys):
    path = tmp_path / "e.trace"
    path.write_text("")
    assert main(["check", str(path)]) == EXIT_PASS
    assert capsys.readouterr().out.strip() == "CONSISTENT"


@pytest.mark.parametrize("text", ["0 t1 WI 0\n", "0 t1 ZZ 0 v1 -\n", "0 t1 WR 0 - -\n"])
def test_cli_check_rejects_bad_traces(tmp_path, text):
    path = tmp_path / "bad.trace"
    path.write_text(text)
    assert main(["check", str(path)]) == EXIT_USAGE


def test_cli_check_missing_file(tmp_path):
    assert main(["check", str(tmp_path / "nope")]) == EXIT_USAGE


def test_cli_run_is_reproducible(tmp_path, capsys):
    sched = tmp_path / "f.txt"
    sched.write_text("4 rollback m0 offline\n")
    argv = ["run", "--blocks", "8", "--block-size", "128", "--threads", "2", "--ops", "6",
            "--fsync-every", "2", "--seed", "7", "--faults", str(sched)]
    t1, t2 = tmp_path / "a.trace", tmp_path / "b.trace"
    rep = tmp_path / "r.txt"
    assert main(argv + ["--trace-out", str(t1), "--report", str(rep)]) == EXIT_PASS
    out1 = capsys.readouterr().out
    assert main(argv + ["--trace-out", str(t2)]) == EXIT_PASS
    assert capsys.readouterr().out == out1 == rep.read_text()
    assert t1.read_bytes() == t2.read_bytes()
    assert "verdict=PASS" in out1 and "eras=2" in out1
    # The recorded trace re-checks to the run's verdict.
    assert main(["check", str(t1)]) == EXIT_PASS


def test_cli_run_bad_schedule(tmp_path):
    sched = tmp_path / "f.txt"
    sched.write_text("1 explode m0\n")
    assert main(["run", "--faults", str(sched)]) == EXIT_USAGE


def test_cli_run_bad_configuration():
    assert main(["run", "--nodes", "5", "--f", "1"]) == EXIT_USAGE


def test_cli_file_ops_preset(capsys):
    assert main(["run", "--preset", "file-ops", "--ops", "1", "--threads", "1", "--blocks", "64"]) == EXIT_PASS


def test_cli_systematic_fuzz_smoke(tmp_path, capsys):
    rep = tmp_path / "fz.txt"
    assert main(["fuzz", "--systematic", "--max-template", "1", "--report", str(rep)]) == EXIT_PASS
    text = rep.read_text()
    assert "campaign=ace" in text and "failures=0" in text


def test_cli_fuzz_smoke(capsys):
    assert main(["fuzz", "--schedules", "5", "--seed", "100"]) == EXIT_PASS
    assert "runs=5" in capsys.readouterr().out
