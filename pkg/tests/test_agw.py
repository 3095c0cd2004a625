import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accessnet.agw import (
    OCS,
    AccessGateway,
    AgwError,
    Checkpoint,
    FsmState,
    PendingLookup,
    challenge_response,
    derive_session_key,
)
from accessnet.dataplane import Direction, SimPacket
from accessnet.federation import FederatedProfile, FederationMode, NotFound
from accessnet.model import AccessTechnology, Policy, PolicyPhase, SubscriberProfile
from accessnet.orchestrator import AgwDescriptor, Orchestrator
from accessnet.ran import AttachAccept, ChallengeResponse, GenericAccessRequest, GenericChallenge, RanElement, Reject

LTE, WIFI = AccessTechnology.LTE_LIKE, AccessTechnology.WIFI_LIKE


def key(i):
    return bytes([i % 256]) * 16


def sid(i):
    return f"0010100000{i:05d}"


def make_orch(n=5, policy=None, **sub_kw):
    o = Orchestrator()
    o.upsert_policy(policy or Policy.flat("basic", 0))
    o.register_agw(AgwDescriptor("agw1", "10.1.0.0/16", ("enb1", "ap1")))
    for i in range(n):
        o.add_subscriber(SubscriberProfile(sid(i), key(i), "basic", **sub_kw))
    return o


def make_agw(orch=None, agw_id="agw1", max_active=96, **kw):
    orch = orch or make_orch()
    gw = AccessGateway(agw_id, **kw)
    gw.register_ran_element(RanElement("enb1", LTE, agw_id, max_active))
    gw.register_ran_element(RanElement("ap1", WIFI, agw_id, max_active))
    push(orch, gw)
    return gw


def push(orch, gw):
    snap = orch.drain_outbound()
    latest = [s for a, s in snap if a == gw.agw_id] or [orch._links[gw.agw_id].owner.latest]
    gw.apply_config_snapshot(latest[-1])


def attach(gw, i, tech=LTE, element=None, now=0, k=None):
    element = element or ("enb1" if tech is LTE else "ap1")
    ch = gw.handle_access_request(GenericAccessRequest(sid(i), tech, element), now)
    if not isinstance(ch, GenericChallenge):
        return ch
    mac = challenge_response(key(i) if k is None else k, ch.nonce)
    return gw.handle_challenge_response(ChallengeResponse(sid(i), mac, element), now)


def test_challenge_has_fresh_nonce():
    gw = make_agw()
    a = gw.handle_access_request(GenericAccessRequest(sid(0), LTE, "enb1"))
    b = gw.handle_access_request(GenericAccessRequest(sid(1), LTE, "enb1"))
    assert isinstance(a, GenericChallenge) and len(a.nonce) == 16 and a.nonce != b.nonce
    assert gw.fsm_state(sid(0)) is FsmState.CHALLENGE_SENT


def test_full_attach():
    gw = make_agw()
    ch = gw.handle_access_request(GenericAccessRequest(sid(0), LTE, "enb1"))
    acc = gw.handle_challenge_response(ChallengeResponse(sid(0), challenge_response(key(0), ch.nonce), "enb1"))
    assert isinstance(acc, AttachAccept)
    assert acc.ue_ip == "10.1.0.1" and acc.session_key == derive_session_key(key(0), ch.nonce)
    assert gw.fsm_state(sid(0)) is FsmState.ACTIVE
    # programmed within the same sync round
    assert gw.sessions_in_sync and len(gw.dataplane.table) == 2
    assert gw.dataplane.forward(SimPacket("203.0.113.1", acc.ue_ip, 100), Direction.DOWNLINK).forwarded


def test_unknown_and_forbidden():
    o = make_orch(1)
    o.add_subscriber(SubscriberProfile("001019999999999", key(9), "basic", frozenset({WIFI})))
    gw = make_agw(o)
    assert attach(gw, 77).reason == "unknown"
    req = GenericAccessRequest("001019999999999", LTE, "enb1")
    assert gw.handle_access_request(req).reason == "forbidden"
    assert gw.fsm_state("001019999999999") is FsmState.IDLE


def test_bad_mac_and_timeout_return_to_idle():
    gw = make_agw(nonce_timeout_ms=10_000)
    assert attach(gw, 0, k=key(5)).reason == "auth"
    assert gw.fsm_state(sid(0)) is FsmState.IDLE
    ch = gw.handle_access_request(GenericAccessRequest(sid(1), LTE, "enb1"), 0)
    late = gw.handle_challenge_response(ChallengeResponse(sid(1), challenge_response(key(1), ch.nonce), "enb1"), 10_001)
    assert late.reason == "timeout" and gw.fsm_state(sid(1)) is FsmState.IDLE


def test_response_without_challenge_is_protocol_error():
    gw = make_agw()
    res = gw.handle_challenge_response(ChallengeResponse(sid(0), b"x" * 16, "enb1"))
    assert isinstance(res, Reject) and res.reason == "protocol"


def test_97th_attach_congested():
    gw = make_agw(make_orch(100), max_active=96)
    for i in range(96):
        assert isinstance(attach(gw, i), AttachAccept)
    assert attach(gw, 96).reason == "congested"
    gw.detach(gw.session_for(sid(0)).session_id)
    assert isinstance(attach(gw, 96), AttachAccept)


def test_agw_session_cap():
    gw = make_agw(make_orch(3), max_sessions=2)
    attach(gw, 0)
    attach(gw, 1, WIFI)
    assert attach(gw, 2).reason == "congested"


def test_reattach_replaces_session():
    gw = make_agw()
    a = attach(gw, 0)
    b = attach(gw, 0)
    assert a.session_id != b.session_id and list(gw.sessions) == [b.session_id]
    assert a.session_id in gw.final_reports


def test_detach_and_double_detach():
    gw = make_agw()
    acc = attach(gw, 0)
    first = gw.detach(acc.session_id)
    second = gw.detach(acc.session_id)
    assert first.existed and not second.existed
    assert gw.fsm_state(sid(0)) is FsmState.DETACHED
    res = gw.dataplane.forward(SimPacket("203.0.113.1", acc.ue_ip, 10), Direction.DOWNLINK)
    assert not res.forwarded
    # the address goes back to the pool
    assert attach(gw, 1).ue_ip == acc.ue_ip


def test_detach_during_dataplane_partition_converges():
    gw = make_agw()
    acc = attach(gw, 0, now=0)
    gw.dataplane_link_up = False
    gw.detach(acc.session_id, 1000)
    assert not gw.sessions_in_sync and len(gw.dataplane.table) == 2
    for t in range(2000, 60_000, 1000):
        gw.reconcile_tick(t)
    assert len(gw.dataplane.table) == 2
    gw.dataplane_link_up = True
    healed = 60_000
    t = healed
    while not gw.sessions_in_sync:
        t += 1000
        gw.reconcile_tick(t)
    assert gw.dataplane.table == {} and t - healed <= 5000


def test_wifi_and_lte_share_session_path():
    gw = make_agw()
    lte = attach(gw, 0, LTE)
    rec_lte = gw.session_for(sid(0)).to_dict()
    gw.detach(lte.session_id)
    wifi = attach(gw, 0, WIFI)
    rec_wifi = gw.session_for(sid(0)).to_dict()
    differ = {k for k in rec_lte if rec_lte[k] != rec_wifi[k]}
    assert differ <= {"technology", "ran_element_id", "session_id", "tunnel_id"}
    assert gw.dataplane.sessions[wifi.session_id]["tunnel_id"] is None


def test_existing_session_keeps_policy_snapshot():
    o = make_orch(2)
    gw = make_agw(o)
    attach(gw, 0)
    o.upsert_policy(Policy.flat("basic", 5_000_000))
    push(o, gw)
    assert gw.session_for(sid(0)).policy.phases[0].rate_limit_bps == 0
    attach(gw, 1)
    assert gw.session_for(sid(1)).policy.phases[0].rate_limit_bps == 5_000_000


def test_new_subscriber_attaches_only_after_config_arrives():
    o = make_orch(1)
    gw = make_agw(o)
    o.add_subscriber(SubscriberProfile(sid(50), key(50), "basic"))
    assert attach(gw, 50).reason == "unknown"
    push(o, gw)
    assert isinstance(attach(gw, 50), AttachAccept)


def test_stale_state_admission_while_disconnected():
    o = make_orch(2)
    gw = make_agw(o)
    o.remove_subscriber(sid(0))
    # the AGW has not heard about the removal yet: it still admits from cache
    assert isinstance(attach(gw, 0), AttachAccept)
    push(o, gw)
    gw.detach(gw.session_for(sid(0)).session_id)
    assert attach(gw, 0).reason == "unknown"


def test_headless_attach_never_calls_out():
    gw = make_agw(make_orch(10))
    for i in range(10):
        attach(gw, i)
    assert all(dest != "orchestrator" for dest, _ in gw.drain_outbox())


def test_phase_advances_on_byte_threshold():
    pol = Policy("basic", (PolicyPhase(10_000_000, byte_threshold=1000), PolicyPhase(2_000_000)))
    gw = make_agw(make_orch(1, pol))
    acc = attach(gw, 0)
    for i in range(12):
        gw.dataplane.forward(SimPacket("203.0.113.1", acc.ue_ip, 100, timestamp_ms=i), Direction.DOWNLINK)
    events = gw.counter_tick(1000)
    assert [e["phase_index"] for e in events] == [1]
    assert gw.dataplane.meters[acc.session_id].rate_bps == 2_000_000


def test_phase_advances_on_duration():
    pol = Policy("basic", (PolicyPhase(1_000_000, duration=3000), PolicyPhase(0)))
    gw = make_agw(make_orch(1, pol))
    attach(gw, 0, now=0)
    assert gw.counter_tick(2000) == []
    assert gw.counter_tick(3000)[0]["rate_bps"] == 0


# quota ---------------------------------------------------------------------------


def test_quota_session_requests_grant_and_enforces_it():
    gw = make_agw(make_orch(1, charging_mode="quota"), quota_size=2000)
    acc = attach(gw, 0)
    (dest, req), = gw.drain_outbox()
    assert dest == OCS and req["type"] == "quota_request"
    assert gw.dataplane.sessions[acc.session_id]["quota_authorized"] == 0
    gw.on_charging_message({"type": "quota_grant", "grant_id": "g1", "session_id": acc.session_id,
                            "granted_bytes": 2000, "request_sent_ms": 0}, 10)
    ok = [gw.dataplane.forward(SimPacket("203.0.113.1", acc.ue_ip, 500, timestamp_ms=20), Direction.DOWNLINK).forwarded
          for _ in range(5)]
    assert ok == [True] * 4 + [False]
    gw.detach(acc.session_id, 100)
    finals = [m for d, m in gw.drain_outbox() if m["type"] == "usage_report" and m["final"]]
    assert finals == [{"type": "usage_report", "grant_id": "g1", "used_bytes": 2000, "final": True, "sent_ms": 100}]


def test_grant_for_departed_session_is_returned():
    gw = make_agw(make_orch(1, charging_mode="quota"))
    acc = attach(gw, 0)
    gw.detach(acc.session_id)
    gw.drain_outbox()
    gw.on_charging_message({"type": "quota_grant", "grant_id": "g7", "session_id": acc.session_id,
                            "granted_bytes": 10, "request_sent_ms": 0})
    (dest, msg), = gw.drain_outbox()
    assert msg["grant_id"] == "g7" and msg["used_bytes"] == 0 and msg["final"]


# federation -----------------------------------------------------------------------


def test_local_breakout_lookup():
    gw = make_agw(make_orch(0), federation_mode=FederationMode.LOCAL_BREAKOUT)
    sub = "999990000000001"
    res = gw.handle_access_request(GenericAccessRequest(sub, LTE, "enb1"))
    assert isinstance(res, PendingLookup)
    assert gw.drain_outbox()[0][1]["type"] == "feg_lookup"
    prof = FederatedProfile(sub, key(3), Policy.flat("roam", 5_000_000))
    ch = gw.on_feg_response(prof)
    acc = gw.handle_challenge_response(ChallengeResponse(sub, challenge_response(key(3), ch.nonce), "enb1"))
    assert isinstance(acc, AttachAccept)
    assert gw.dataplane.sessions[acc.session_id]["rate_bps"] == 5_000_000
    gw.handle_access_request(GenericAccessRequest("999990000000002", LTE, "enb1"))
    assert gw.on_feg_response(NotFound("999990000000002", "unavailable")).reason == "unknown"


# checkpoint -------------------------------------------------------------------------


def test_checkpoint_restore():
    o = make_orch(12)
    gw = make_agw(o)
    for i in range(10):
        attach(gw, i, now=i)
    cp = gw.take_checkpoint(100)
    digest = gw.session_digest()
    for i in range(10, 12):
        attach(gw, i, now=200)
    assert len(gw.sessions) == 12
    blob = cp.dumps()
    fresh = AccessGateway("agw1")
    fresh.restore_checkpoint(Checkpoint.from_dict(__import__("json").loads(blob)), 300)
    assert len(fresh.sessions) == 10 and fresh.session_digest() == digest == cp.session_digest()
    fresh.reconcile_tick(400)
    assert fresh.dataplane.table_digest() == gw_table_digest_for(cp)
    # restored cache serves attaches without the orchestrator
    fresh.register_ran_element(RanElement("enb1", LTE, "agw1"))
    acc = attach(fresh, 11, now=500)
    assert isinstance(acc, AttachAccept) and acc.ue_ip not in {s.ue_ip for s in cp.sessions}


def gw_table_digest_for(cp):
    probe = AccessGateway(cp.agw_id)
    probe.restore_checkpoint(cp)
    return probe.dataplane.table_digest()


def test_restore_rejects_wrong_id_and_used_gateway():
    gw = make_agw()
    attach(gw, 0)
    cp = gw.take_checkpoint()
    with pytest.raises(AgwError):
        AccessGateway("agw2").restore_checkpoint(cp)
    with pytest.raises(AgwError):
        gw.restore_checkpoint(cp)


def test_crash_does_not_touch_other_gateway():
    o = make_orch(6)
    o.register_agw(AgwDescriptor("agw2", "10.2.0.0/16", ("enb2",)))
    gw1 = make_agw(o)
    gw2 = AccessGateway("agw2", "10.2.0.0/16")
    gw2.register_ran_element(RanElement("enb1", LTE, "agw2"))
    gw2.apply_config_snapshot(o._links["agw2"].owner.latest)
    for i in range(3):
        attach(gw1, i)
        attach(gw2, i + 3)
    before = (gw2.session_digest(), gw2.dataplane.table_digest())
    del gw1
    assert (gw2.session_digest(), gw2.dataplane.table_digest()) == before


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["attach", "detach"]), st.integers(0, 11)), max_size=80))
def test_ip_uniqueness(ops):
    gw = make_agw(make_orch(12), debug=True)
    for op, i in ops:
        if op == "attach":
            attach(gw, i, WIFI if i % 2 else LTE)
        else:
            s = gw.session_for(sid(i))
            if s is not None:
                gw.detach(s.session_id)
        ips = [s.ue_ip for s in gw.sessions.values()]
        assert len(ips) == len(set(ips))
        assert len({s.subscriber for s in gw.sessions.values()}) == len(gw.sessions)
