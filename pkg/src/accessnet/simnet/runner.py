"""Scenario runner: wires orchestrator, AGWs, RAN, OCS and FeG onto one event loop.

Control messages travel over :class:`Channel` objects and are delivered as
events.  User packets take a synchronous path at emission time (AGW user
plane capacity, data plane, RAN capacity gate, RAN link loss) because no
component on that path keeps per-packet state beyond counters and buckets.

Every random draw comes from an RNG named after the component that makes
it, so perturbing one AGW leaves the draws of all others untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

from ..agw import AccessGateway, PendingLookup, challenge_response
from ..charging import Ocs
from ..dataplane import Direction, SimPacket, TokenBucket, default_burst
from ..federation import ExternalCoreStub, FederatedProfile, Feg, FederationMode
from ..model import AccessTechnology, MetricsSample, Policy, SubscriberProfile, canonical_json
from ..orchestrator import AgwDescriptor, ConfigStore, Orchestrator
from ..ran import (
    ChallengeResponse,
    GenericAccessRequest,
    LteAdapter,
    RanElement,
    Reject,
    UeRadio,
    WifiAdapter,
)
from ..sync import DEFAULT_RESEND_INTERVAL_MS
from .events import Channel, EventLoop, Latency
from .scenario import Scenario, load_scenario, provisioned_key

INTERNET = "203.0.113.1"
TICK_MS = 1000
CHARGING_TICK_MS = 10_000
DEFAULT_ATTACH_COST_MS = 50.0
DEFAULT_QUEUE_LIMIT = 64
DEFAULT_CHECKPOINT_INTERVAL_MS = 10_000
DEFAULT_ATTACH_TIMEOUT_MS = 60_000
DEFAULT_EPOCH_MS = 100

DROP_REASONS = ("no_match", "rate_limited", "quota_exhausted", "ran_capacity", "channel_loss", "agw_capacity")


def _t(x: float) -> float:
    """Round a timestamp for output so traces stay compact and stable."""
    return round(x, 3)


@dataclass
class RunReport:
    trace: list[dict]
    metrics: list[dict]
    summary: dict

    def trace_bytes(self) -> bytes:
        return b"".join(canonical_json(r) + b"\n" for r in self.trace)

    def metrics_bytes(self) -> bytes:
        return b"".join(canonical_json(r) + b"\n" for r in self.metrics)

    @property
    def trace_sha256(self) -> str:
        return hashlib.sha256(self.trace_bytes()).hexdigest()

    @property
    def metrics_sha256(self) -> str:
        return hashlib.sha256(self.metrics_bytes()).hexdigest()

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "trace.jsonl"), "wb") as fh:
            fh.write(self.trace_bytes())
        with open(os.path.join(out_dir, "metrics.jsonl"), "wb") as fh:
            fh.write(self.metrics_bytes())
        with open(os.path.join(out_dir, "summary.json"), "wb") as fh:
            fh.write(canonical_json(self.summary) + b"\n")

    @classmethod
    def read(cls, out_dir) -> "RunReport":
        def lines(name):
            with open(os.path.join(out_dir, name), "rb") as fh:
                return [json.loads(line) for line in fh if line.strip()]

        with open(os.path.join(out_dir, "summary.json"), "rb") as fh:
            summary = json.load(fh)
        return cls(lines("trace.jsonl"), lines("metrics.jsonl"), summary)


@dataclass
class UeState:
    index: int
    spec: dict
    subscriber: str
    key: bytes
    technology: AccessTechnology
    element_id: str
    agw_id: str
    radio: UeRadio
    state: str = "idle"
    attempts: int = 0
    attempt_started: float = 0.0
    session_id: Optional[str] = None
    ue_ip: Optional[str] = None
    tunnel_id: Optional[int] = None
    traffic_token: int = 0
    generated_packets: int = 0
    generated_bytes: int = 0
    delivered_bytes: int = 0
    drops: dict = field(default_factory=dict)
    reported: tuple = ()


class AgwHost:
    """One AGW plus the simulated control-plane server and user-plane budget around it."""

    def __init__(self, sim: "Simulation", spec: dict, pool: str, elements: list[RanElement]):
        self.sim = sim
        self.spec = spec
        self.agw_id = spec["agw_id"]
        self.pool = pool
        self.elements = elements
        self.gw: Optional[AccessGateway] = None
        self.incarnation = 0
        self.checkpoint = None
        self.queue_limit = spec.get("queue_limit", DEFAULT_QUEUE_LIMIT)
        self.requests: deque = deque()
        self.responses: deque = deque()
        self.busy = False
        self.busy_since = 0.0
        self.busy_total = 0.0
        self._busy_mark = 0.0
        self._epoch_mark = 0.0
        self.delivered_bytes = 0
        self._delivered_mark = 0
        self.cups = spec.get("cups")
        self.up_bucket: Optional[TokenBucket] = None
        up_bps = spec.get("user_plane_bps")
        if self.cups is not None:
            total, user = self.cups["total_cores"], self.cups["user_cores"]
            cp_cores = total if user == "flexible" else total - user
            self.stage_ms = math.inf if cp_cores <= 0 else 500.0 / (self.cups["attach_rate_per_core"] * cp_cores)
            up_bps = self.cups["bps_per_core"] * (total if user == "flexible" else user)
        else:
            self.stage_ms = spec.get("attach_cost_ms", DEFAULT_ATTACH_COST_MS) / 2.0
        if up_bps is not None:
            self.up_bucket = TokenBucket(up_bps, burst_bytes=max(default_burst(up_bps), 1.0))
        self.adapters = {AccessTechnology.LTE_LIKE: LteAdapter(), AccessTechnology.WIFI_LIKE: WifiAdapter()}
        for el in elements:
            self.adapters[el.technology].register(el.ran_element_id)

    @property
    def flexible(self) -> bool:
        return self.cups is not None and self.cups["user_cores"] == "flexible"

    def busy_now(self) -> float:
        return self.busy_total + (self.sim.loop.now - self.busy_since if self.busy else 0.0)

    # --- lifecycle ---------------------------------------------------------

    def boot(self, checkpoint=None) -> None:
        sim = self.sim
        now = sim.now_int()
        self.incarnation += 1
        gw = AccessGateway(
            self.agw_id,
            self.pool,
            nonce_timeout_ms=sim.options.get("nonce_timeout_ms", 10_000),
            max_sessions=self.spec.get("max_sessions"),
            quota_size=sim.ocs.quota_size,
            grant_validity_ms=max(0, sim.ocs.grant_timeout_ms - TICK_MS),
            federation_mode=FederationMode(sim.sc.federation_mode),
            resend_interval_ms=sim.resend_interval_ms,
            seed=f"{sim.seed}:{self.incarnation}",
            debug=sim.debug,
        )
        for el in self.elements:
            gw.register_ran_element(el)
        if checkpoint is not None:
            gw.restore_checkpoint(checkpoint, now)
        self.gw = gw
        inc = self.incarnation
        loop = sim.loop
        loop.every(TICK_MS, lambda t: self._tick(inc, t))
        loop.every(CHARGING_TICK_MS, lambda t: self._charging(inc, t))
        loop.every(self.spec.get("checkpoint_interval_ms", DEFAULT_CHECKPOINT_INTERVAL_MS), lambda t: self._checkpoint(inc, t))
        if self.flexible:
            loop.every(self.cups.get("epoch_ms", DEFAULT_EPOCH_MS), lambda t: self._epoch(inc, t))
        if self.incarnation > 1:
            self._checkin()

    def crash(self) -> None:
        self.sim.record({"ev": "agw_crash", "agw": self.agw_id, "sessions": len(self.gw.sessions) if self.gw else 0})
        if self.busy:
            self.busy_total += self.sim.loop.now - self.busy_since
        self.gw = None
        self.incarnation += 1
        self.requests.clear()
        self.responses.clear()
        self.busy = False

    def restore(self, with_checkpoint: bool) -> None:
        cp = self.checkpoint if with_checkpoint else None
        self.checkpoint = None
        self.boot(cp)
        self.sim.record(
            {
                "ev": "agw_restore",
                "agw": self.agw_id,
                "sessions": len(self.gw.sessions),
                "session_digest": self.gw.session_digest(),
                "checkpoint_digest": cp.session_digest() if cp is not None else None,
                "dataplane_generation": self.gw.dataplane.generation,
            }
        )

    # --- timers --------------------------------------------------------------

    def _alive(self, inc: int) -> bool:
        return self.gw is not None and inc == self.incarnation

    def _tick(self, inc: int, t: float) -> bool:
        if not self._alive(inc):
            return False
        now = self.sim.now_int()
        for ev in self.gw.counter_tick(now):
            ev["agw"] = self.agw_id
            self.sim.record(ev)
        self.gw.reconcile_tick(now)
        self.flush()
        self._checkin()
        return True

    def _charging(self, inc: int, t: float) -> bool:
        if not self._alive(inc):
            return False
        self.gw.charging_tick(self.sim.now_int())
        self.flush()
        return True

    def _checkpoint(self, inc: int, t: float) -> bool:
        if not self._alive(inc):
            return False
        self.checkpoint = self.gw.take_checkpoint(self.sim.now_int())
        self.sim.record(
            {
                "ev": "checkpoint",
                "agw": self.agw_id,
                "sessions": len(self.checkpoint.sessions),
                "session_digest": self.checkpoint.session_digest(),
            }
        )
        return True

    def _epoch(self, inc: int, t: float) -> bool:
        if not self._alive(inc):
            return False
        busy = self.busy_now()
        span = self.cups.get("epoch_ms", DEFAULT_EPOCH_MS)
        frac = min(1.0, (busy - self._epoch_mark) / span)
        self._epoch_mark = busy
        rate = self.cups["bps_per_core"] * self.cups["total_cores"] * (1.0 - frac)
        self.up_bucket.set_rate(rate, t, burst_bytes=max(default_burst(rate), 1.0))
        return True

    def sample_metrics(self, t: float) -> list[MetricsSample]:
        busy = self.busy_now()
        delta_busy, self._busy_mark = busy - self._busy_mark, busy
        delivered, self._delivered_mark = self.delivered_bytes - self._delivered_mark, self.delivered_bytes
        out = [
            MetricsSample(_t(t), self.agw_id, "cp_busy_ms", _t(delta_busy)),
            MetricsSample(_t(t), self.agw_id, "delivered_bytes", float(delivered)),
            MetricsSample(_t(t), self.agw_id, "sessions_active", float(len(self.gw.sessions) if self.gw else 0)),
        ]
        if self.up_bucket is not None:
            out.append(MetricsSample(_t(t), self.agw_id, "up_capacity_bps", float(self.up_bucket.rate_bps)))
        return out

    # --- southbound: control-plane server ------------------------------------

    def on_ran_uplink(self, msg, element_id: str) -> None:
        if self.gw is None:
            return
        element = self.sim.elements[element_id]
        generic = self.adapters[element.technology].translate_in(msg)
        if generic is None:
            return
        if isinstance(generic, ChallengeResponse):
            # attaches already in progress are never shed
            self.responses.append(generic)
        elif len(self.requests) >= self.queue_limit:
            self.sim.record({"ev": "cp_overflow", "agw": self.agw_id, "subscriber": generic.subscriber})
            self._reply(Reject(generic.subscriber, "congested", element_id))
            return
        else:
            self.requests.append(generic)
        self._serve_next()

    def _serve_next(self) -> None:
        if self.busy or self.gw is None or math.isinf(self.stage_ms):
            return
        queue = self.responses if self.responses else self.requests
        if not queue:
            return
        job = queue.popleft()
        self.busy = True
        self.busy_since = self.sim.loop.now
        self.sim.loop.after(self.stage_ms, self._finish, job, self.incarnation)

    def _finish(self, job, inc: int) -> None:
        if inc != self.incarnation:
            return
        self.busy = False
        self.busy_total += self.sim.loop.now - self.busy_since
        now = self.sim.now_int()
        if isinstance(job, GenericAccessRequest):
            reply = self.gw.handle_access_request(job, now)
        else:
            reply = self.gw.handle_challenge_response(job, now)
        if not isinstance(reply, PendingLookup):
            self._reply(reply)
        self.flush()
        self._serve_next()

    def _reply(self, reply) -> None:
        element = self.sim.elements.get(reply.ran_element_id)
        if element is None:
            return
        msg = self.adapters[element.technology].translate_out(reply)
        ue = self.sim.ue_by_sub.get(reply.subscriber)
        if ue is not None:
            self.sim.channel(f"ran:{element.ran_element_id}").send(self.sim.loop, self.sim.ue_downlink, ue, msg)

    def on_detach(self, session_id: str) -> None:
        if self.gw is not None:
            self.gw.detach(session_id, self.sim.now_int())
            self.flush()

    # --- northbound / charging / federation ------------------------------------

    def _checkin(self) -> None:
        msg = self.gw.checkin(self.sim.now_int())
        msg["metrics"] = []
        self.sim.send_backhaul(self.agw_id, self.sim.orch_checkin, self.agw_id, msg)

    def on_config(self, snap) -> None:
        if self.gw is None:
            return
        result = self.gw.apply_config_snapshot(snap, self.sim.now_int())
        if result.applied:
            self.sim.record({"ev": "config_applied", "agw": self.agw_id, "generation": snap.generation})
        if result.ack is not None:
            self.sim.send_backhaul(self.agw_id, self.sim.orch_ack, self.agw_id, result.ack)

    def flush(self) -> None:
        if self.gw is None:
            return
        sim = self.sim
        for dest, msg in self.gw.drain_outbox():
            if dest == "ocs":
                sim.channel(f"ocs:{self.agw_id}").send(sim.loop, sim.ocs_receive, self.agw_id, msg)
            elif dest == "feg":
                sim.channel(f"feg:{self.agw_id}").send(sim.loop, sim.feg_receive, self.agw_id, msg)

    def on_charging(self, msg: dict) -> None:
        if self.gw is not None:
            self.gw.on_charging_message(msg, self.sim.now_int())
            self.flush()

    def on_feg_answer(self, answer) -> None:
        if self.gw is None:
            return
        reply = self.gw.on_feg_response(answer, self.sim.now_int())
        if reply is not None:
            self._reply(reply)
        self.flush()


class Simulation:
    def __init__(self, scenario: Scenario, seed: Any = None):
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.options = scenario.options
        self.debug = bool(self.options.get("debug"))
        self.trace_packets = bool(self.options.get("trace_packets"))
        self.resend_interval_ms = self.options.get("resend_interval_ms", DEFAULT_RESEND_INTERVAL_MS)
        self.loop = EventLoop()
        self.trace: list[dict] = []
        self.metrics: list[dict] = []
        self._channels: dict[str, Channel] = {}
        self._partitions = self._partition_windows()

        self.elements = {r["ran_element_id"]: RanElement.from_dict(r) for r in scenario.ran_elements}
        self.ran_gates = {
            eid: TokenBucket(el.max_throughput_bps) for eid, el in sorted(self.elements.items())
        }
        registry = {}
        pools = {}
        for i, spec in enumerate(scenario.agws):
            pools[spec["agw_id"]] = spec.get("ip_pool", f"10.{i + 1}.0.0/16")
            ran_ids = tuple(sorted(e for e, el in self.elements.items() if el.agw_id == spec["agw_id"]))
            registry[spec["agw_id"]] = AgwDescriptor(spec["agw_id"], pools[spec["agw_id"]], ran_ids)
        store = ConfigStore(
            {s.id: s for s in scenario.subscribers},
            {p.id: p for p in scenario.policies},
            registry,
            generation=1,
        )
        self.orch = Orchestrator(store=store, resend_interval_ms=self.resend_interval_ms)

        ch = scenario.charging
        self.ocs = Ocs(ch.get("quota_size", 1_000_000), ch.get("grant_timeout_ms", 60_000))
        for acct in ch.get("accounts", []):
            self.ocs.open_account(acct["subscriber"], acct["balance_bytes"])

        fed = scenario.federation
        core = ExternalCoreStub(
            {p["subscriber"]: FederatedProfile.from_dict(p) for p in fed.get("external_core", [])},
            latency_ms=fed.get("latency_ms", 50),
            down_windows=[tuple(w) for w in fed.get("down_windows", [])],
        )
        self.feg = Feg(core, fed.get("ttl_ms", 300_000), fed.get("timeout_ms", 2_000))

        self.hosts = {
            spec["agw_id"]: AgwHost(
                self,
                spec,
                pools[spec["agw_id"]],
                [el for _, el in sorted(self.elements.items()) if el.agw_id == spec["agw_id"]],
            )
            for spec in scenario.agws
        }
        self.ues: list[UeState] = []
        self.ue_by_sub: dict[str, UeState] = {}
        keys = {s.id: s.auth_key for s in scenario.subscribers}
        keys.update({m["subscriber"]["id"]: bytes.fromhex(m["subscriber"]["auth_key"])
                     for m in scenario.mutations if m["op"] == "add_subscriber"})
        keys.update({sub: p.auth_key for sub, p in core.directory.items()})
        for i, spec in enumerate(scenario.population):
            el = self.elements[spec["ran_element_id"]]
            sub = spec["subscriber"]
            key = bytes.fromhex(spec["auth_key"]) if "auth_key" in spec else keys.get(sub, provisioned_key(sub))
            ue = UeState(i, spec, sub, key, el.technology, el.ran_element_id, el.agw_id,
                         UeRadio(sub, el.technology, el.ran_element_id))
            self.ues.append(ue)
            self.ue_by_sub[sub] = ue

    # --- plumbing ------------------------------------------------------------

    def now_int(self) -> int:
        return int(self.loop.now)

    def record(self, rec: dict) -> None:
        rec = dict(rec, t=_t(self.loop.now))
        self.trace.append(rec)

    def _partition_windows(self) -> dict[str, list]:
        out: dict[str, list] = {}
        for f in self.sc.faults:
            if f["kind"] == "partition":
                out.setdefault(f["channel"], []).append((f["t0_ms"], f["t1_ms"]))
            elif f["kind"] == "orchestrator_down":
                for a in self.sc.agws:
                    for cls in ("backhaul", "ocs"):
                        out.setdefault(f"{cls}:{a['agw_id']}", []).append((f["t0_ms"], f["t1_ms"]))
        return out

    def channel(self, name: str) -> Channel:
        ch = self._channels.get(name)
        if ch is None:
            spec = self.sc.channel_spec(name)
            ch = self._channels[name] = Channel(
                name,
                spec["loss"],
                Latency.parse(spec["latency_ms"]),
                list(self._partitions.get(name, [])),
                random.Random(f"{self.seed}:chan:{name}"),
            )
        return ch

    def send_backhaul(self, agw_id: str, fn, *args) -> None:
        self.channel(f"backhaul:{agw_id}").send(self.loop, fn, *args)

    def _dispatch_orch(self, out) -> None:
        for agw_id, snap in out:
            host = self.hosts.get(agw_id)
            if host is not None:
                self.send_backhaul(agw_id, host.on_config, snap)

    def orch_checkin(self, agw_id: str, msg: dict) -> None:
        self._dispatch_orch(self.orch.on_checkin(agw_id, msg, self.now_int()))

    def orch_ack(self, agw_id: str, ack) -> None:
        self.orch.on_ack(agw_id, ack, self.now_int())

    def _orch_tick(self, t: float) -> None:
        now = self.now_int()
        self._dispatch_orch(self.orch.drain_outbound())
        self._dispatch_orch(self.orch.reconcile_tick(now))
        for gid in self.ocs.reclaim_stale(now):
            self.record({"ev": "grant_reclaimed"})

    def _mutation(self, m: dict) -> None:
        op = m["op"]
        try:
            if op == "add_subscriber":
                self.orch.add_subscriber(SubscriberProfile.from_dict(m["subscriber"]))
            elif op == "remove_subscriber":
                self.orch.remove_subscriber(m["subscriber"])
            else:
                self.orch.upsert_policy(Policy.from_dict(m["policy"]))
            self.record({"ev": "mutation", "op": op, "generation": self.orch.store.generation})
        except Exception as exc:  # a rejected mutation is an outcome, not a crash
            self.record({"ev": "mutation_rejected", "op": op, "error": str(exc)})
        self._dispatch_orch(self.orch.drain_outbound())

    def ocs_receive(self, agw_id: str, msg: dict) -> None:
        reply = self.ocs.handle(msg, self.now_int())
        if reply is not None:
            host = self.hosts[agw_id]
            self.channel(f"ocs:{agw_id}").send(self.loop, host.on_charging, reply)

    def feg_receive(self, agw_id: str, msg: dict) -> None:
        before = len(self.feg.core.requests)
        ready, answer = self.feg.begin_lookup(msg["subscriber"], self.now_int())
        for t, origin, sub in self.feg.core.requests[before:]:
            self.record({"ev": "external_query", "origin": origin, "subscriber": sub})
        host = self.hosts[agw_id]
        self.loop.at(
            max(self.loop.now, float(ready)),
            lambda: self.channel(f"feg:{agw_id}").send(self.loop, host.on_feg_answer, answer),
        )

    # --- UE behaviour ------------------------------------------------------------

    def ue_attempt(self, ue: UeState) -> None:
        if ue.state not in ("idle", "retry"):
            return
        ue.state = "attaching"
        ue.attempts += 1
        ue.attempt_started = self.loop.now
        self.record({"ev": "attach_attempt", "ue": ue.index, "subscriber": ue.subscriber, "agw": ue.agw_id,
                     "ran": ue.element_id, "attempt": ue.attempts})
        host = self.hosts[ue.agw_id]
        self.channel(f"ran:{ue.element_id}").send(self.loop, host.on_ran_uplink, ue.radio.attach_msg(), ue.element_id)
        timeout = self.options.get("attach_timeout_ms", DEFAULT_ATTACH_TIMEOUT_MS)
        self.loop.after(timeout, self._attach_timeout, ue, ue.attempts)

    def _attach_timeout(self, ue: UeState, attempt: int) -> None:
        if ue.state == "attaching" and ue.attempts == attempt:
            self._attach_failed(ue, "timeout")

    def _attach_failed(self, ue: UeState, reason: str) -> None:
        self.record({"ev": "attach_result", "ue": ue.index, "subscriber": ue.subscriber, "agw": ue.agw_id,
                     "attempt": ue.attempts, "ok": False, "reason": reason,
                     "latency_ms": _t(self.loop.now - ue.attempt_started)})
        retry = ue.spec.get("retry_interval_ms")
        if retry is not None and ue.attempts < ue.spec.get("max_attempts", 1):
            ue.state = "retry"
            self.loop.after(retry, self.ue_attempt, ue)
        else:
            ue.state = "done"

    def ue_downlink(self, ue: UeState, msg) -> None:
        nonce = ue.radio.challenge_nonce(msg)
        if nonce is not None:
            if ue.state == "attaching":
                resp = ue.radio.response_msg(challenge_response(ue.key, nonce))
                host = self.hosts[ue.agw_id]
                self.channel(f"ran:{ue.element_id}").send(self.loop, host.on_ran_uplink, resp, ue.element_id)
            return
        kind, detail, tunnel = UeRadio.outcome(msg)
        if kind == "accept":
            if ue.state != "attaching":
                # a late accept for an abandoned attempt; release it
                sess = self.hosts[ue.agw_id].gw.session_for(ue.subscriber) if self.hosts[ue.agw_id].gw else None
                if sess is not None and sess.ue_ip == detail:
                    self._send_detach(ue, sess.session_id)
                return
            gw = self.hosts[ue.agw_id].gw
            sess = gw.session_for(ue.subscriber) if gw is not None else None
            ue.state = "attached"
            ue.ue_ip = detail
            ue.tunnel_id = tunnel if tunnel is not None else (sess.tunnel_id if sess else None)
            ue.session_id = sess.session_id if sess is not None else None
            self.record({"ev": "attach_result", "ue": ue.index, "subscriber": ue.subscriber, "agw": ue.agw_id,
                         "attempt": ue.attempts, "ok": True, "session": ue.session_id, "ue_ip": ue.ue_ip,
                         "latency_ms": _t(self.loop.now - ue.attempt_started)})
            self._start_traffic(ue)
        elif kind == "reject" and ue.state == "attaching":
            self._attach_failed(ue, detail)

    def _start_traffic(self, ue: UeState) -> None:
        tr = ue.spec.get("traffic", {})
        rate = tr.get("rate_bps", 0)
        duration = tr.get("duration_ms", 0)
        ue.traffic_token += 1
        start = self.loop.now + tr.get("start_delay_ms", 0)
        end = start + duration
        if rate > 0 and duration > 0:
            size = tr.get("packet_size", 1250)
            interval = size * 8000.0 / rate
            direction = Direction(tr.get("direction", "downlink"))
            self.loop.at(start, self._packet, ue, ue.traffic_token, size, interval, end, direction)
        elif ue.spec.get("detach", True):
            self.loop.at(end, self._end_session, ue, ue.traffic_token)

    def _end_session(self, ue: UeState, token: int) -> None:
        if ue.state != "attached" or ue.traffic_token != token:
            return
        self._flow_record(ue)
        if ue.spec.get("detach", True):
            ue.state = "done"
            if ue.session_id is not None:
                self._send_detach(ue, ue.session_id)
            self.record({"ev": "detach", "ue": ue.index, "subscriber": ue.subscriber, "agw": ue.agw_id,
                         "session": ue.session_id})
        else:
            ue.state = "idle_attached"

    def _send_detach(self, ue: UeState, session_id: str) -> None:
        host = self.hosts[ue.agw_id]
        self.channel(f"ran:{ue.element_id}").send(self.loop, host.on_detach, session_id)

    def _packet(self, ue: UeState, token: int, size: int, interval: float, end: float, direction: Direction) -> None:
        if ue.state != "attached" or ue.traffic_token != token:
            return
        now = self.loop.now
        ue.generated_packets += 1
        ue.generated_bytes += size
        reason = self._carry(ue, size, now, direction)
        if reason is None:
            ue.delivered_bytes += size
            self.hosts[ue.agw_id].delivered_bytes += size
        else:
            ue.drops[reason] = ue.drops.get(reason, 0) + size
        if self.trace_packets:
            path = ["internet", f"agw:{ue.agw_id}", f"ran:{ue.element_id}"]
            if direction is Direction.UPLINK:
                path.reverse()
            self.record({"ev": "pkt", "ue": ue.index, "agw": ue.agw_id, "size": size, "dir": direction.value,
                         "outcome": reason or "delivered", "path": path})
        nxt = now + interval
        if nxt < end:
            self.loop.at(nxt, self._packet, ue, token, size, interval, end, direction)
        else:
            self.loop.at(max(nxt, end), self._end_session, ue, token)

    def _carry(self, ue: UeState, size: int, now: float, direction: Direction) -> Optional[str]:
        """Push one user packet along its path; returns the drop reason or None."""
        host = self.hosts[ue.agw_id]
        gate = self.ran_gates[ue.element_id]
        link = self.channel(f"ran:{ue.element_id}")
        gw = host.gw
        if direction is Direction.DOWNLINK:
            if gw is None:
                return "no_match"
            if host.up_bucket is not None and not host.up_bucket.consume(size, now):
                return "agw_capacity"
            res = gw.dataplane.forward(SimPacket(INTERNET, ue.ue_ip, size, None, now), Direction.DOWNLINK)
            if not res.forwarded:
                return res.reason.value
            if res.session_id != ue.session_id:
                return "no_match"
            if not gate.consume(size, now):
                return "ran_capacity"
            if link.lossy_drop():
                return "channel_loss"
            return None
        if not gate.consume(size, now):
            return "ran_capacity"
        if link.lossy_drop():
            return "channel_loss"
        if gw is None:
            return "no_match"
        if host.up_bucket is not None and not host.up_bucket.consume(size, now):
            return "agw_capacity"
        res = gw.dataplane.forward(SimPacket(ue.ue_ip, INTERNET, size, ue.tunnel_id, now), Direction.UPLINK)
        if not res.forwarded:
            return res.reason.value
        return None if res.session_id == ue.session_id else "no_match"

    def _flow_record(self, ue: UeState) -> None:
        snapshot = (ue.generated_bytes, ue.delivered_bytes, tuple(sorted(ue.drops.items())))
        if snapshot == ue.reported:
            return
        ue.reported = snapshot
        host = self.hosts[ue.agw_id]
        sess = host.gw.sessions.get(ue.session_id) if host.gw is not None and ue.session_id else None
        self.record(
            {
                "ev": "flow_stats",
                "ue": ue.index,
                "subscriber": ue.subscriber,
                "agw": ue.agw_id,
                "session": ue.session_id,
                "generated_packets": ue.generated_packets,
                "generated_bytes": ue.generated_bytes,
                "delivered_bytes": ue.delivered_bytes,
                "drops": dict(sorted(ue.drops.items())),
                "phase_index": sess.phase_index if sess is not None else None,
            }
        )

    def _stats_tick(self, t: float) -> None:
        for ue in self.ues:
            if ue.state == "attached":
                self._flow_record(ue)
        for agw_id in sorted(self.hosts):
            self.metrics.extend(s.to_dict() for s in self.hosts[agw_id].sample_metrics(t))

    def _debug_check(self) -> None:
        for host in self.hosts.values():
            if host.gw is not None:
                ips = [s.ue_ip for s in host.gw.sessions.values()]
                assert len(ips) == len(set(ips)), f"duplicate UE address on {host.agw_id}"

    # --- run ----------------------------------------------------------------------

    def run(self) -> RunReport:
        loop = self.loop
        duration = self.sc.duration_ms
        for agw_id in sorted(self.hosts):
            self.hosts[agw_id].boot()
        self._dispatch_orch(self.orch.drain_outbound())
        loop.every(TICK_MS, self._orch_tick)
        loop.every(self.options.get("flow_stats_interval_ms", TICK_MS), self._stats_tick)
        for m in self.sc.mutations:
            loop.at(m["t_ms"], self._mutation, m)
        for f in self.sc.faults:
            if f["kind"] == "agw_crash":
                host = self.hosts[f["agw"]]
                loop.at(f["t_ms"], host.crash)
                loop.at(f["restore_ms"], host.restore, f.get("with_checkpoint", True))
            else:
                loop.at(f["t0_ms"], self.record, {"ev": "fault_start", **f})
                loop.at(f["t1_ms"], self.record, {"ev": "fault_end", **f})
        for ue in self.ues:
            loop.at(ue.spec["attach_time_ms"], self.ue_attempt, ue)
        loop.run(until=duration, on_step=self._debug_check if self.debug else None)
        for ue in self.ues:
            if ue.state == "attaching":
                self.record({"ev": "attach_result", "ue": ue.index, "subscriber": ue.subscriber, "agw": ue.agw_id,
                             "attempt": ue.attempts, "ok": False, "reason": "unfinished",
                             "latency_ms": _t(loop.now - ue.attempt_started)})
            if ue.state == "attached":
                self._flow_record(ue)
        report = RunReport(self.trace, self.metrics, {})
        report.summary = self._summary(report)
        return report

    def _summary(self, report: RunReport) -> dict:
        attempts = sum(1 for r in self.trace if r["ev"] == "attach_attempt")
        ok = sum(1 for r in self.trace if r["ev"] == "attach_result" and r["ok"])
        drops = {k: 0 for k in DROP_REASONS}
        for ue in self.ues:
            for k, v in ue.drops.items():
                drops[k] += v
        agws = {}
        for agw_id in sorted(self.hosts):
            gw = self.hosts[agw_id].gw
            agws[agw_id] = (
                {"alive": False}
                if gw is None
                else {
                    "alive": True,
                    "sessions": len(gw.sessions),
                    "session_digest": gw.session_digest(),
                    "dataplane_digest": gw.dataplane.table_digest(),
                    "config_generation": gw.config_generation,
                }
            )
        return {
            "seed": self.seed,
            "duration_ms": self.sc.duration_ms,
            "ues": len(self.ues),
            "attach_attempts": attempts,
            "attach_successes": ok,
            "csr": (ok / attempts) if attempts else None,
            "generated_bytes": sum(u.generated_bytes for u in self.ues),
            "delivered_bytes": sum(u.delivered_bytes for u in self.ues),
            "dropped_bytes": drops,
            "agws": agws,
            "orchestrator": {"generation": self.orch.store.generation, "digest": self.orch.store.digest()},
            "ocs": {"charged": self.ocs.charged, "reclaimed": len(self.ocs.reclaimed)},
            "feg": {"hits": self.feg.hits, "misses": self.feg.misses,
                    "external_queries": len(self.feg.core.requests)},
            "channels": {name: ch.stats() for name, ch in sorted(self._channels.items())},
            "events": self.loop.steps,
            "trace_sha256": report.trace_sha256,
            "metrics_sha256": report.metrics_sha256,
        }


def run_scenario(scenario, seed: Any = None, out=None) -> RunReport:
    """Validate and run a scenario (a path, a dict or a :class:`Scenario`)."""
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    report = Simulation(sc, seed).run()
    if out is not None:
        report.write(out)
    return report
