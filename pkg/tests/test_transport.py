import random

import pytest
import simpy
from hypothesis import given, settings, strategies as st

from replidisk.transport import (
    BadFrame,
    ConfigError,
    ConfigService,
    Configuration,
    LinkRule,
    MsgType,
    Network,
    WireMessage,
    host_of,
)

KEY = b"k" * 32


def test_frame_round_trip():
    m = WireMessage(MsgType.WRITE_REPL, 3, 99, 7, 2, b"payload")
    assert WireMessage.decode(m.encode(KEY), KEY) == m


def test_frame_rejects_wrong_key_and_short_frames():
    frame = WireMessage(MsgType.ACK, 1, 2).encode(KEY)
    with pytest.raises(BadFrame):
        WireMessage.decode(frame, b"x" * 32)
    with pytest.raises(BadFrame):
        WireMessage.decode(frame[:10], KEY)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200), st.integers(0, 10_000), st.integers(0, 7))
def test_any_bit_flip_is_rejected(payload, pos, bit):
    frame = bytearray(WireMessage(MsgType.PAGE_RESP, 4, 5, 6, 0, payload).encode(KEY))
    frame[pos % len(frame)] ^= 1 << bit
    with pytest.raises(BadFrame):
        WireMessage.decode(bytes(frame), KEY)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=300))
def test_garbage_never_decodes(blob):
    with pytest.raises(BadFrame):
        WireMessage.decode(blob, KEY)


# ---------------------------------------------------------------------------
# Network


def net_with_inbox(latency=0.001):
    env = simpy.Environment()
    net = Network(env, latency, random.Random(0))
    inbox = []
    net.attach("m1.0", lambda src, frame: inbox.append((env.now, src, frame)))
    return env, net, inbox


def test_fifo_delivery_after_latency():
    env, net, inbox = net_with_inbox()
    for i in range(3):
        net.send("m0.0", "m1.0", bytes([i]), MsgType.ACK)
    env.run()
    assert [f for _, _, f in inbox] == [b"\0", b"\1", b"\2"]
    assert inbox[0][0] == pytest.approx(0.001)


def test_unattached_endpoint_drops():
    env, net, inbox = net_with_inbox()
    net.send("m0.0", "m2.0", b"x", MsgType.ACK)
    env.run()
    assert net.dropped == 1


def test_drop_and_dup_rules_count_down():
    env, net, inbox = net_with_inbox()
    net.add_rule("m0", "m1", LinkRule("drop", 1))
    net.add_rule("m0", "m1", LinkRule("dup", 1, types=frozenset({MsgType.ACK})))
    # Both rules spend themselves on the first message, which is dropped.
    net.send("m0.0", "m1.0", b"a", MsgType.ACK)
    net.send("m0.0", "m1.0", b"b", MsgType.ACK)
    net.send("m0.0", "m1.0", b"c", MsgType.P1A)
    env.run()
    assert [f for _, _, f in inbox] == [b"b", b"c"]
    assert net.log[0][-1] == "dropped"


def test_dup_rule_delivers_twice():
    env, net, inbox = net_with_inbox()
    net.add_rule("m0", "m1", LinkRule("dup", None, types=frozenset({MsgType.P1A})))
    net.send("m0.0", "m1.0", b"a", MsgType.ACK)
    net.send("m0.0", "m1.0", b"b", MsgType.P1A)
    env.run()
    assert [f for _, _, f in inbox] == [b"a", b"b", b"b"]


def test_corrupt_rule_breaks_the_mac():
    env, net, inbox = net_with_inbox()
    net.add_rule("m0", "m1", LinkRule("corrupt", 1))
    frame = WireMessage(MsgType.ACK, 1, 1).encode(KEY)
    net.send("m0.0", "m1.0", frame, MsgType.ACK)
    env.run()
    with pytest.raises(BadFrame):
        WireMessage.decode(inbox[0][2], KEY)


def test_hold_lets_later_traffic_overtake():
    env, net, inbox = net_with_inbox()
    net.add_rule("m0", "m1", LinkRule("delay", 1, delay=0.01))
    net.send("m0.0", "m1.0", b"a", MsgType.ACK)
    net.send("m0.0", "m1.0", b"b", MsgType.ACK)
    env.run()
    assert [f for _, _, f in inbox] == [b"b", b"a"]


def test_link_delay_preserves_order():
    env, net, inbox = net_with_inbox()
    net.set_delay("m0", "m1", 0.05)
    net.send("m0.0", "m1.0", b"a", MsgType.ACK)
    net.send("m0.0", "m1.0", b"b", MsgType.ACK)
    env.run()
    assert [f for _, _, f in inbox] == [b"a", b"b"]
    assert inbox[0][0] == pytest.approx(0.051)


def test_links_are_per_machine():
    env = simpy.Environment()
    net = Network(env)
    assert net.link("m0.1", "m1.4") is net.link("m0.2", "m1")
    assert host_of("m3.12") == "m3"


# ---------------------------------------------------------------------------
# Configurations


def test_configuration_bounds():
    Configuration(1, ("a",), 0)
    Configuration(1, ("a", "b", "c"), 1)
    with pytest.raises(ConfigError):
        Configuration(1, ("a", "b", "c", "d"), 1)
    with pytest.raises(ConfigError):
        Configuration(1, ("a",), 1)
    with pytest.raises(ConfigError):
        Configuration(1, ("a", "a"), 1)


def test_configuration_encoding():
    c = Configuration(7, ("m0.1", "m1.3"), 1)
    assert Configuration.decode(c.encode()) == c
    assert c.primary == "m0.1" and c.backups == ("m1.3",)


def test_match_a_is_append_only():
    svc = ConfigService()
    c1 = Configuration(1, ("a", "b"), 1)
    reply = svc.match_a(1, c1)
    assert reply.ballot == 1 and reply.all_conf == (c1,)
    assert svc.match_a(1, c1).all_conf == (c1,)
    with pytest.raises(ConfigError):
        svc.match_a(1, Configuration(1, ("b", "a"), 1))
    with pytest.raises(ConfigError):
        svc.match_a(2, c1)
    c2 = Configuration(2, ("b", "c"), 1)
    assert svc.match_a(2, c2).all_conf == (c1, c2)
    assert svc.highest_ballot == 2


def test_activation_watermark_is_monotone():
    svc = ConfigService()
    svc.activate(3)
    svc.activate(2)
    assert svc.activated == 3
