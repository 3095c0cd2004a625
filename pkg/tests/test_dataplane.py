import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accessnet.dataplane import (
    Dataplane,
    Direction,
    DropReason,
    FlowRule,
    SimPacket,
    TokenBucket,
    default_burst,
    rules_for,
    table_digest,
)
from accessnet.model import DesiredStateSnapshot, SnapshotKind

from oracles import bucket_delivered_bytes

NET = "203.0.113.1"
UP, DOWN = Direction.UPLINK, Direction.DOWNLINK


def sess(sid, ip, tid=None, rate=0, quota=None):
    return {"session_id": sid, "ue_ip": ip, "tunnel_id": tid, "rate_bps": rate, "quota_authorized": quota}


def snap(gen, *objs):
    return DesiredStateSnapshot(gen, SnapshotKind.SESSIONS, {o["session_id"]: o for o in objs})


X, Y, Z = sess("X", "10.1.0.1", 11), sess("Y", "10.1.0.2", 12), sess("Z", "10.1.0.3", 13)


def test_three_sessions_six_rules():
    dp = Dataplane()
    dp.program(snap(1, X, Y))
    assert len(dp.table) == 4
    dp.program(snap(2, X, Y, Z))
    assert len(dp.table) == 6
    assert {(r.session_id, r.direction) for r in dp.table.values()} == {
        (s, d) for s in "XYZ" for d in Direction
    }


def test_empty_snapshot_drops_everything():
    dp = Dataplane()
    dp.program(snap(1, X))
    dp.program(snap(2))
    assert dp.table == {}
    res = dp.forward(SimPacket(NET, X["ue_ip"], 100), DOWN)
    assert not res.forwarded and res.reason is DropReason.NO_MATCH


def test_same_snapshot_twice_is_idempotent():
    dp = Dataplane()
    dp.program(snap(1, X, Y))
    dp.forward(SimPacket(NET, X["ue_ip"], 500), DOWN)
    digest, counters = dp.table_digest(), dp.read_counters()
    res = dp.program(snap(1, X, Y))
    assert not res.applied
    assert dp.table_digest() == digest and dp.read_counters() == counters


def test_counters_survive_reprogramming():
    dp = Dataplane()
    dp.program(snap(1, X))
    dp.forward(SimPacket(NET, X["ue_ip"], 700), DOWN)
    dp.program(snap(2, X, Y))
    assert dp.read_counters()[("X", DOWN)].bytes == 700


def test_uplink_decap_and_count():
    dp = Dataplane()
    dp.program(snap(1, X))
    res = dp.forward(SimPacket(X["ue_ip"], NET, 1400, tunnel_id=11), UP)
    assert res.forwarded and res.packet.tunnel_id is None and res.session_id == "X"
    assert dp.read_counters()[("X", UP)].bytes == 1400


def test_downlink_encap_lte_plain_wifi():
    dp = Dataplane()
    w = sess("W", "10.1.0.9")
    dp.program(snap(1, X, w))
    assert dp.forward(SimPacket(NET, X["ue_ip"], 100), DOWN).packet.tunnel_id == 11
    assert dp.forward(SimPacket(NET, w["ue_ip"], 100), DOWN).packet.tunnel_id is None
    assert dp.forward(SimPacket(w["ue_ip"], NET, 100), UP).forwarded


def test_unknown_source_and_wrong_tunnel_are_no_match():
    dp = Dataplane()
    dp.program(snap(1, X))
    assert dp.forward(SimPacket("10.9.9.9", NET, 10), UP).reason is DropReason.NO_MATCH
    assert dp.forward(SimPacket(X["ue_ip"], NET, 10, tunnel_id=99), UP).reason is DropReason.NO_MATCH


def test_ten_packets():
    dp = Dataplane()
    dp.program(snap(1, X))
    for i in range(10):
        dp.forward(SimPacket(NET, X["ue_ip"], 1000, timestamp_ms=i), DOWN)
    c = dp.read_counters()[("X", DOWN)]
    assert (c.packets, c.bytes) == (10, 10_000)


def test_read_counters_is_a_copy():
    dp = Dataplane()
    dp.program(snap(1, X))
    before = dp.read_counters()
    dp.forward(SimPacket(NET, X["ue_ip"], 1000), DOWN)
    assert before[("X", DOWN)].bytes == 0


def test_detached_counters_move_to_final_report():
    dp = Dataplane()
    dp.program(snap(1, X, Y))
    dp.forward(SimPacket(NET, X["ue_ip"], 300), DOWN)
    dp.program(snap(2, Y))
    assert ("X", DOWN) not in dp.read_counters()
    final = dp.pop_retired()
    assert final["X"]["downlink"]["bytes"] == 300 and final["X"]["charged"] == 300
    assert dp.pop_retired() == {}


def test_sixty_seconds_at_twice_the_meter():
    rate = 10_000_000
    dp = Dataplane()
    dp.program(snap(1, sess("X", "10.1.0.1", 1, rate)), now_ms=0)
    size = 1250
    interval = size * 8000 / (2 * rate)
    n = int(60_000 / interval)
    for i in range(n):
        dp.forward(SimPacket(NET, "10.1.0.1", size, timestamp_ms=i * interval), DOWN)
    got = dp.read_counters()[("X", DOWN)].bytes
    assert got == pytest.approx(75_000_000, rel=0.02)
    assert got <= bucket_delivered_bytes(rate, default_burst(rate), 60.0)


def test_quota_exhausted():
    dp = Dataplane()
    dp.program(snap(1, sess("Q", "10.1.0.5", 3, 0, quota=2500)))
    outcomes = [dp.forward(SimPacket(NET, "10.1.0.5", 1000), DOWN).reason for _ in range(4)]
    assert outcomes == [None, None, DropReason.QUOTA_EXHAUSTED, DropReason.QUOTA_EXHAUSTED]
    assert dp.charged["Q"] == 2000


def test_rate_change_keeps_meter_state():
    dp = Dataplane()
    dp.program(snap(1, sess("X", "10.1.0.1", 1, 8_000_000)), now_ms=0)
    dp.forward(SimPacket(NET, "10.1.0.1", 100_000, timestamp_ms=0), DOWN)
    dp.program(snap(2, sess("X", "10.1.0.1", 1, 800_000)), now_ms=0)
    m = dp.meters["X"]
    assert m.rate_bps == 800_000 and m.tokens <= m.burst_bytes == default_burst(800_000)


def test_counter_report_shape():
    dp = Dataplane("agw1")
    dp.program(snap(1, X))
    dp.forward(SimPacket(NET, X["ue_ip"], 10), DOWN)
    rep = dp.counter_report()
    assert rep["agw_id"] == "agw1" and rep["generation"] == 1
    assert rep["sessions"]["X"]["downlink"]["bytes"] == 10 and rep["sessions"]["X"]["charged"] == 10


# properties ---------------------------------------------------------------------


def _direct_table(objs):
    # build rules by hand from the action vocabulary, independent of rules_for
    rules = []
    for o in objs:
        tid, sid = o["tunnel_id"], o["session_id"]
        meter = [("meter", sid)] if o["rate_bps"] else []
        up = ([("decap", tid)] if tid is not None else []) + meter + [("count",), ("forward",)]
        down = meter + [("count",)] + ([("encap", tid)] if tid is not None else []) + [("forward",)]
        rules.append(FlowRule(o["ue_ip"], UP, tuple(up), sid))
        rules.append(FlowRule(o["ue_ip"], DOWN, tuple(down), sid))
    return table_digest(rules)


def test_table_is_pure_function_of_session_set():
    # every session set of size <= 3 drawn from two subscribers' variants
    variants = [
        sess("a1", "10.1.0.1", 1), sess("a2", "10.1.0.1", 2, 5_000_000),
        sess("b1", "10.1.0.2", None), sess("b2", "10.1.0.3", 4, 1_000_000, quota=10),
    ]
    sets = [c for n in range(4) for c in itertools.combinations(variants, n)
            if len({o["ue_ip"] for o in c}) == len(c)]
    for history in itertools.permutations(sets, 2):
        dp = Dataplane()
        for gen, objs in enumerate(history, 1):
            dp.program(snap(gen, *objs))
        assert dp.table_digest() == _direct_table(history[-1])


events = st.lists(
    st.tuples(st.floats(0, 50, allow_nan=False), st.integers(1, 3000), st.sampled_from([UP, DOWN])),
    max_size=200,
)


@given(events, st.integers(0, 20_000_000), st.one_of(st.none(), st.integers(0, 200_000)))
def test_conservation(evs, rate, quota):
    dp = Dataplane()
    dp.program(snap(1, sess("X", "10.1.0.1", 5, rate, quota)))
    t = 0.0
    offered = {UP: 0, DOWN: 0}
    for gap, size, d in evs:
        t += gap
        pkt = SimPacket("10.1.0.1", NET, size, 5, t) if d is UP else SimPacket(NET, "10.1.0.1", size, None, t)
        offered[d] += size
        dp.forward(pkt, d)
    for d in Direction:
        c = dp.read_counters()[("X", d)]
        assert c.bytes + c.dropped_bytes == offered[d]
        assert sum(c.drops.values()) == c.dropped_bytes


@settings(max_examples=60)
@given(st.integers(100_000, 50_000_000), st.lists(st.tuples(st.floats(0, 30), st.integers(1, 4000)), min_size=1, max_size=400))
def test_rate_bound(rate, evs):
    burst = default_burst(rate)
    bucket = TokenBucket(rate)
    t, log = 0.0, []
    for gap, size in evs:
        t += gap
        if bucket.consume(size, t):
            log.append((t, size))
        assert 0 <= bucket.tokens <= burst
    # every window, not just those >= 10 burst/rate, obeys the exact bound
    for i in range(len(log)):
        total = 0
        for j in range(i, len(log)):
            total += log[j][1]
            window_s = (log[j][0] - log[i][0]) / 1000
            assert total <= rate / 8 * window_s + burst + 1e-6


@given(st.lists(st.integers(1, 5000), max_size=100), st.integers(0, 100_000))
def test_quota_bound(sizes, grant):
    dp = Dataplane()
    dp.program(snap(1, sess("X", "10.1.0.1", 5, 0, grant)))
    for s in sizes:
        dp.forward(SimPacket(NET, "10.1.0.1", s), DOWN)
    assert dp.charged["X"] <= grant


def test_unmetered_rate_zero():
    rules = rules_for(sess("X", "10.1.0.1", 1, 0))
    assert all(a[0] != "meter" for r in rules for a in r.actions)


def test_packets_need_a_byte():
    with pytest.raises(ValueError):
        SimPacket(NET, "10.1.0.1", 0)
