import dataclasses
import json
import pathlib
import re

import pytest

from accessnet.model import AccessTechnology
from accessnet.ran import (
    UNKNOWN_ELEMENT,
    AttachAccept,
    ChallengeResponse,
    GenericAccessRequest,
    GenericChallenge,
    LteAdapter,
    LteAttachAccept,
    LteAttachMsg,
    LteAttachReject,
    LteAuthRequest,
    LteAuthResponse,
    RanElement,
    Reject,
    UeRadio,
    WifiAccessAccept,
    WifiAccessChallenge,
    WifiAccessReject,
    WifiAccessRequest,
    WifiAdapter,
    adapter_for,
)
from accessnet.simnet import Simulation, load_scenario
from accessnet.simnet import builders
from accessnet.simnet.events import Channel

LTE, WIFI = AccessTechnology.LTE_LIKE, AccessTechnology.WIFI_LIKE
SRC = pathlib.Path(__file__).resolve().parents[1] / "src" / "accessnet"


def test_lte_attach_maps_to_generic_request():
    a = LteAdapter(["enb1"])
    assert a.lte_translate_in(LteAttachMsg("001010000000001", "enb1")) == GenericAccessRequest(
        "001010000000001", LTE, "enb1"
    )
    assert a.lte_translate_in(LteAuthResponse("001010000000001", "enb1", b"m" * 16)) == ChallengeResponse(
        "001010000000001", b"m" * 16, "enb1"
    )


def test_wifi_request_maps_to_generic_request():
    a = WifiAdapter(["ap1"])
    assert a.wifi_translate_in(WifiAccessRequest("001010000000001", "ap1")).technology is WIFI
    assert isinstance(a.wifi_translate_in(WifiAccessRequest("001010000000001", "ap1", b"r")), ChallengeResponse)


def test_unknown_element_dropped_and_counted():
    lte, wifi = LteAdapter(["enb1"]), WifiAdapter(["ap1"])
    assert lte.lte_translate_in(LteAttachMsg("1234567", "enb9")) is None
    assert wifi.wifi_translate_in(WifiAccessRequest("1234567", "ap9")) is None
    assert wifi.wifi_translate_in(WifiAccessRequest("1234567", "ap9")) is None
    assert lte.counters[UNKNOWN_ELEMENT] == 1 and wifi.counters[UNKNOWN_ELEMENT] == 2
    lte.register("enb9")
    assert lte.lte_translate_in(LteAttachMsg("1234567", "enb9")) is not None


def test_outbound_lte():
    a = LteAdapter(["enb1"])
    assert a.lte_translate_out(GenericChallenge("s", b"n" * 16, "enb1")) == LteAuthRequest("s", "enb1", b"n" * 16)
    acc = a.lte_translate_out(AttachAccept("s", "sess", "10.1.0.1", 7, b"k", LTE, "enb1"))
    assert acc == LteAttachAccept("s", "enb1", "10.1.0.1", 7, b"k")


@pytest.mark.parametrize(
    "reason,cause",
    [("unknown", "imsi_unknown_in_hss"), ("forbidden", "eps_services_not_allowed"),
     ("congested", "congestion"), ("auth", "authentication_failure")],
)
def test_lte_reject_causes(reason, cause):
    out = LteAdapter().lte_translate_out(Reject("s", reason, "enb1"))
    assert isinstance(out, LteAttachReject) and out.emm_cause == cause


def test_wifi_accept_carries_no_tunnel():
    a = WifiAdapter(["ap1"])
    out = a.wifi_translate_out(AttachAccept("s", "sess", "10.1.0.1", 7, b"k", WIFI, "ap1"))
    assert isinstance(out, WifiAccessAccept)
    assert "tunnel" not in " ".join(f.name for f in dataclasses.fields(out))
    assert a.wifi_translate_out(Reject("s", "unknown", "ap1")) == WifiAccessReject("s", "ap1", "unknown")
    assert a.wifi_translate_out(GenericChallenge("s", b"n", "ap1")) == WifiAccessChallenge("s", "ap1", b"n")


def test_non_messages_rejected():
    with pytest.raises(TypeError):
        LteAdapter(["enb1"]).lte_translate_in(WifiAccessRequest("s", "enb1"))
    with pytest.raises(TypeError):
        WifiAdapter().wifi_translate_out("hello")


def test_adapter_for_and_element_defaults():
    assert isinstance(adapter_for("lte_like"), LteAdapter)
    assert isinstance(adapter_for(WIFI), WifiAdapter)
    lte, wifi = RanElement("e", "lte_like", "agw1"), RanElement("a", "wifi_like", "agw1")
    assert (lte.max_active, lte.max_throughput_bps) == (96, 126_000_000)
    assert (wifi.max_active, wifi.max_throughput_bps) == (64, 100_000_000)
    assert RanElement.from_dict(lte.to_dict()) == lte


@pytest.mark.parametrize("tech", [LTE, WIFI])
def test_ue_radio_round_trip_through_adapter(tech):
    ue = UeRadio("001010000000001", tech, "x")
    ad = adapter_for(tech)
    ad.register("x")
    req = ad.translate_in(ue.attach_msg())
    assert isinstance(req, GenericAccessRequest) and req.technology is tech
    ch = ad.translate_out(GenericChallenge(req.subscriber, b"z" * 16, "x"))
    assert ue.challenge_nonce(ch) == b"z" * 16
    resp = ad.translate_in(ue.response_msg(b"mac"))
    assert resp == ChallengeResponse(req.subscriber, b"mac", "x")
    kind, ip, tunnel = UeRadio.outcome(ad.translate_out(AttachAccept(req.subscriber, "s", "10.1.0.4", 9, b"k", tech, "x")))
    assert (kind, ip) == ("accept", "10.1.0.4") and tunnel == (9 if tech is LTE else None)


def test_flavoured_messages_stay_at_the_edge():
    pattern = re.compile(r"\b(Lte|Wifi)[A-Z]\w*")
    users = set()
    for path in SRC.rglob("*.py"):
        if pattern.search(path.read_text()):
            users.add(path.relative_to(SRC).as_posix())
    assert users <= {"ran.py", "simnet/runner.py"}
    # the runner only touches them through UeRadio and the adapters
    runner = (SRC / "simnet" / "runner.py").read_text()
    assert set(pattern.findall(runner)) <= {"Lte", "Wifi"}
    assert not re.search(r"\b(Lte|Wifi)(Attach|Auth|Access)\w*", runner)


def test_tunnel_ids_never_leave_the_agw(monkeypatch):
    sent = []
    orig = Channel.send

    def spy(self, loop, deliver, *args):
        if not self.name.startswith("ran:"):
            sent.append((self.name, repr(args)))
        return orig(self, loop, deliver, *args)

    monkeypatch.setattr(Channel, "send", spy)
    sc = builders.multi_agw(agws=2, ues_per_agw=4, duration_ms=30_000)
    sc["options"] = {"trace_packets": True}
    report = Simulation(load_scenario(sc)).run()
    assert report.summary["attach_successes"] == 8
    assert sent and {n.split(":")[0] for n, _ in sent} >= {"backhaul", "ocs"}
    assert not [n for n, a in sent if "tunnel" in a or "teid" in a]
    assert not [r for r in report.trace if "tunnel" in json.dumps(r)]


def test_same_subscriber_over_either_access():
    pol = {"policy_id": "basic"}

    def run(tech):
        sc = builders.base(20_000)
        sc["network"]["agws"] = [{"agw_id": "agw1"}]
        sc["network"]["ran_elements"] = [
            {"ran_element_id": "enb1", "technology": "lte_like", "agw_id": "agw1"},
            {"ran_element_id": "ap1", "technology": "wifi_like", "agw_id": "agw1"},
        ]
        sc["network"]["channels"] = {"backhaul": {"loss": 0, "latency_ms": 20}}
        sc["population"] = [{"count": 1, "id_start": "001010000000001", "rate_per_s": 1, "start_ms": 2000,
                             "ran_elements": ["enb1" if tech == "lte" else "ap1"], "provision": pol,
                             "traffic": {"rate_bps": 1e6, "duration_ms": 5000, "packet_size": 1250}}]
        sim = Simulation(load_scenario(sc))
        report = sim.run()
        return report, sim.hosts["agw1"].gw

    (r_lte, gw_lte), (r_wifi, gw_wifi) = run("lte"), run("wifi")
    assert r_lte.summary["csr"] == r_wifi.summary["csr"] == 1.0
    assert r_lte.summary["delivered_bytes"] == r_wifi.summary["delivered_bytes"] > 0
    rec_l = [r for r in r_lte.trace if r["ev"] == "attach_result"]
    rec_w = [r for r in r_wifi.trace if r["ev"] == "attach_result"]
    assert [r["ok"] for r in rec_l] == [r["ok"] for r in rec_w]


def test_population_subscriber_listed_once():
    from accessnet.simnet import ScenarioError

    sc = builders.federated(2)
    sc["population"][1]["subscriber"] = sc["population"][0]["subscriber"]
    with pytest.raises(ScenarioError, match="appears twice"):
        load_scenario(sc)
