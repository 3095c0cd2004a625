"""Access gateway: the local control plane at the network edge.

An :class:`AccessGateway` owns every piece of runtime state for the UEs it
serves.  It authenticates them against a locally cached copy of the
orchestrator's configuration (so attaches keep working while the backhaul
is down), allocates addresses and tunnels, snapshots each session's policy,
and keeps its co-located data plane programmed through the sessions
desired-state stream.

Messages for remote components (OCS, FeG) are appended to ``outbox`` as
``(destination, message)`` pairs; the transport drains them.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Optional

from .charging import DEFAULT_GRANT_TIMEOUT_MS, DEFAULT_QUOTA_SIZE, GrantWallet
from .dataplane import Dataplane, Direction
from .federation import FederatedProfile, FederationMode, NotFound
from .model import (
    AccessTechnology,
    ChargingMode,
    DesiredStateSnapshot,
    IpPool,
    Policy,
    SessionRecord,
    SessionStatus,
    SnapshotKind,
    SubscriberProfile,
    canonical_json,
    digest64,
)
from .ran import AttachAccept, ChallengeResponse, GenericAccessRequest, GenericChallenge, RanElement, Reject
from .sync import DEFAULT_RESEND_INTERVAL_MS, ApplyResult, SyncOwner, SyncReceiver

log = logging.getLogger(__name__)

OCS = "ocs"
FEG = "feg"

DEFAULT_NONCE_TIMEOUT_MS = 10_000
COUNTER_REPORT_INTERVAL_MS = 1_000
USAGE_REPORT_INTERVAL_MS = 10_000


def keyed_mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()[:16]


def challenge_response(auth_key: bytes, nonce: bytes) -> bytes:
    """What a UE holding ``auth_key`` answers to ``nonce``."""
    return keyed_mac(auth_key, nonce)


def derive_session_key(auth_key: bytes, nonce: bytes) -> bytes:
    return keyed_mac(auth_key, nonce + b"sess")


class AgwError(Exception):
    pass


class FsmState(str, enum.Enum):
    IDLE = "idle"
    CHALLENGE_SENT = "challenge_sent"
    ACTIVE = "active"
    DETACHED = "detached"


@dataclass
class AttachFsm:
    state: FsmState = FsmState.IDLE
    nonce: bytes = b""
    issued_ms: int = 0
    request: Optional[GenericAccessRequest] = None
    profile: Optional[SubscriberProfile] = None
    policy: Optional[Policy] = None
    session_ref: Optional[str] = None


@dataclass(frozen=True)
class PendingLookup:
    subscriber: str


@dataclass(frozen=True)
class DetachAck:
    session_id: str
    existed: bool


@dataclass
class SubscriberCache:
    generation: int = 0
    subscribers: dict[str, SubscriberProfile] = field(default_factory=dict)
    policies: dict[str, Policy] = field(default_factory=dict)

    @classmethod
    def from_objects(cls, generation: int, objects: dict) -> "SubscriberCache":
        cache = cls(generation)
        for key, obj in objects.items():
            kind, _, name = key.partition("/")
            if kind == "subscriber":
                cache.subscribers[name] = SubscriberProfile.from_dict(obj)
            elif kind == "policy":
                cache.policies[name] = Policy.from_dict(obj)
        return cache


@dataclass(frozen=True)
class Checkpoint:
    agw_id: str
    taken_at_ms: int
    sessions: tuple
    ip_pool_cursor: int
    config_generation: int
    tunnel_cursor: int = 1
    session_cursor: int = 1
    config_objects: dict = field(default_factory=dict)
    wallets: dict = field(default_factory=dict)

    def session_digest(self) -> int:
        return session_set_digest(self.sessions)

    def to_dict(self) -> dict:
        return {
            "agw_id": self.agw_id,
            "taken_at_ms": self.taken_at_ms,
            "sessions": [s.to_dict() for s in self.sessions],
            "ip_pool_cursor": self.ip_pool_cursor,
            "config_generation": self.config_generation,
            "tunnel_cursor": self.tunnel_cursor,
            "session_cursor": self.session_cursor,
            "config_objects": self.config_objects,
            "wallets": self.wallets,
        }

    @classmethod
    def from_dict(cls, d) -> "Checkpoint":
        kw = dict(d)
        kw["sessions"] = tuple(SessionRecord.from_dict(s) for s in d["sessions"])
        return cls(**kw)

    def dumps(self) -> bytes:
        return canonical_json(self.to_dict())


def session_set_digest(sessions) -> int:
    return digest64(canonical_json(sorted((s.to_dict() for s in sessions), key=lambda d: d["session_id"])))


def flow_object(rec: SessionRecord, quota_allowance: Optional[int]) -> dict:
    """The data plane's view of a session."""
    return {
        "session_id": rec.session_id,
        "ue_ip": rec.ue_ip,
        "tunnel_id": rec.tunnel_id if rec.technology is AccessTechnology.LTE_LIKE else None,
        "rate_bps": rec.phase.rate_limit_bps,
        "quota_authorized": quota_allowance if rec.quota_mode else None,
    }


class AccessGateway:
    def __init__(
        self,
        agw_id: str,
        ip_pool: str = "10.1.0.0/16",
        *,
        nonce_timeout_ms: int = DEFAULT_NONCE_TIMEOUT_MS,
        max_sessions: Optional[int] = None,
        quota_size: int = DEFAULT_QUOTA_SIZE,
        grant_validity_ms: int = DEFAULT_GRANT_TIMEOUT_MS - COUNTER_REPORT_INTERVAL_MS,
        federation_mode: FederationMode = FederationMode.STANDALONE,
        resend_interval_ms: int = DEFAULT_RESEND_INTERVAL_MS,
        seed: Any = 0,
        debug: bool = False,
    ):
        self.agw_id = agw_id
        self.ip_pool_network = ip_pool
        self.nonce_timeout_ms = nonce_timeout_ms
        self.max_sessions = max_sessions
        self.quota_size = quota_size
        self.grant_validity_ms = grant_validity_ms
        self.federation_mode = FederationMode(federation_mode)
        self.debug = debug
        self.rng = random.Random(f"{seed}:{agw_id}")

        self.cache = SubscriberCache()
        self._config_rx = SyncReceiver(SnapshotKind.CONFIG)
        self._session_tx = SyncOwner(SnapshotKind.SESSIONS, resend_interval_ms)
        self.dataplane = Dataplane(agw_id)
        self.dataplane_link_up = True

        self.pool = IpPool(ip_pool)
        self.tunnel_cursor = 1
        self.session_cursor = 1
        self.sessions: dict[str, SessionRecord] = {}
        self.ran_elements: dict[str, RanElement] = {}
        self._fsm: dict[str, AttachFsm] = {}
        self._pending_lookups: dict[str, GenericAccessRequest] = {}
        self._federated: dict[str, FederatedProfile] = {}
        self.wallets: dict[str, GrantWallet] = {}
        self._pending_finals: dict[str, dict] = {}
        self._usage_base: dict[str, tuple[int, int]] = {}
        self.final_reports: dict[str, dict] = {}
        self.outbox: list[tuple[str, dict]] = []
        self.metrics: Counter = Counter()
        self.restarted = False

    # --- registration / config ------------------------------------------

    def register_ran_element(self, element: RanElement) -> None:
        if element.agw_id != self.agw_id:
            raise AgwError(f"{element.ran_element_id} belongs to {element.agw_id}")
        self.ran_elements[element.ran_element_id] = element

    @property
    def config_generation(self) -> int:
        return self._config_rx.last_applied_generation

    def apply_config_snapshot(self, snapshot: DesiredStateSnapshot, now_ms: int = 0) -> ApplyResult:
        result = self._config_rx.receiver_apply(snapshot)
        self.restarted = False
        if result.applied:
            self.cache = SubscriberCache.from_objects(snapshot.generation, self._config_rx.objects)
        elif result.warning:
            self.metrics["sync.rejected"] += 1
        return result

    # --- attach ------------------------------------------------------------

    def _reject(self, req, reason: str) -> Reject:
        self.metrics[f"attach.reject.{reason}"] += 1
        self._fsm.pop(req.subscriber, None)
        return Reject(req.subscriber, reason, req.ran_element_id)

    def _active_on(self, ran_element_id: str) -> int:
        return sum(1 for s in self.sessions.values() if s.ran_element_id == ran_element_id)

    def _congested(self, req, subscriber: str) -> bool:
        replacing = any(s.subscriber == subscriber for s in self.sessions.values())
        if self.max_sessions is not None and len(self.sessions) - replacing >= self.max_sessions:
            return True
        element = self.ran_elements.get(req.ran_element_id)
        if element is not None and element.max_active is not None:
            same = any(
                s.subscriber == subscriber and s.ran_element_id == req.ran_element_id for s in self.sessions.values()
            )
            return self._active_on(req.ran_element_id) - same >= element.max_active
        return False

    def handle_access_request(
        self, req: GenericAccessRequest, now_ms: int = 0
    ) -> "GenericChallenge | Reject | PendingLookup":
        self.metrics["attach.requests"] += 1
        self._fsm.pop(req.subscriber, None)
        profile = self.cache.subscribers.get(req.subscriber)
        if profile is None:
            if self.federation_mode is FederationMode.LOCAL_BREAKOUT:
                self._pending_lookups[req.subscriber] = req
                self.outbox.append(
                    (FEG, {"type": "feg_lookup", "subscriber": req.subscriber, "agw_id": self.agw_id, "sent_ms": now_ms})
                )
                return PendingLookup(req.subscriber)
            return self._reject(req, "unknown")
        policy = self.cache.policies.get(profile.policy_id)
        if policy is None:
            return self._reject(req, "unknown")
        return self._challenge(req, profile, policy, now_ms)

    def on_feg_response(self, answer: "FederatedProfile | NotFound", now_ms: int = 0) -> "GenericChallenge | Reject | None":
        req = self._pending_lookups.pop(answer.subscriber, None)
        if req is None:
            return None
        if isinstance(answer, NotFound):
            return self._reject(req, "unknown")
        self._federated[answer.subscriber] = answer
        profile = SubscriberProfile(answer.subscriber, answer.auth_key, answer.policy.id)
        return self._challenge(req, profile, answer.policy, now_ms)

    def _challenge(self, req, profile: SubscriberProfile, policy: Policy, now_ms: int):
        if not profile.allows(req.technology):
            return self._reject(req, "forbidden")
        if self._congested(req, profile.id):
            return self._reject(req, "congested")
        nonce = self.rng.randbytes(16)
        self._fsm[req.subscriber] = AttachFsm(FsmState.CHALLENGE_SENT, nonce, now_ms, req, profile, policy)
        return GenericChallenge(req.subscriber, nonce, req.ran_element_id)

    def handle_challenge_response(self, resp: ChallengeResponse, now_ms: int = 0) -> "AttachAccept | Reject":
        fsm = self._fsm.get(resp.subscriber)
        if fsm is None or fsm.state is not FsmState.CHALLENGE_SENT:
            return self._reject(resp, "protocol")
        if now_ms - fsm.issued_ms > self.nonce_timeout_ms:
            return self._reject(resp, "timeout")
        if not hmac.compare_digest(resp.mac, challenge_response(fsm.profile.auth_key, fsm.nonce)):
            return self._reject(resp, "auth")
        req = fsm.request
        if self._congested(req, resp.subscriber):
            return self._reject(resp, "congested")
        for old in [s for s in self.sessions.values() if s.subscriber == resp.subscriber]:
            self.detach(old.session_id, now_ms)

        quota = fsm.profile.charging_mode is ChargingMode.QUOTA
        sid = f"{self.agw_id}-s{self.session_cursor}"
        self.session_cursor += 1
        rec = SessionRecord(
            session_id=sid,
            subscriber=resp.subscriber,
            agw_id=self.agw_id,
            ue_ip=self.pool.allocate(),
            tunnel_id=self.tunnel_cursor,
            policy=fsm.policy,
            technology=req.technology,
            ran_element_id=req.ran_element_id,
            phase_started_ms=now_ms,
            quota_mode=quota,
            status=SessionStatus.ACTIVE,
        )
        self.tunnel_cursor = self.tunnel_cursor % 0xFFFFFFFF + 1
        self.sessions[sid] = rec
        self._usage_base[sid] = (0, 0)
        if quota:
            self.wallets[sid] = GrantWallet(self.quota_size, self.grant_validity_ms)
            self._request_quota(rec, now_ms)
        fsm.state = FsmState.ACTIVE
        fsm.session_ref = sid
        self.metrics["attach.accepted"] += 1
        self._publish_sessions(now_ms)
        self._check()
        return AttachAccept(
            resp.subscriber,
            sid,
            rec.ue_ip,
            rec.tunnel_id,
            derive_session_key(fsm.profile.auth_key, fsm.nonce),
            rec.technology,
            req.ran_element_id,
        )

    def fsm_state(self, subscriber: str) -> FsmState:
        fsm = self._fsm.get(subscriber)
        return FsmState.IDLE if fsm is None else fsm.state

    def session_for(self, subscriber: str) -> Optional[SessionRecord]:
        for s in self.sessions.values():
            if s.subscriber == subscriber:
                return s
        return None

    # --- detach ------------------------------------------------------------

    def detach(self, session_id: str, now_ms: int = 0) -> DetachAck:
        rec = self.sessions.pop(session_id, None)
        if rec is None:
            return DetachAck(session_id, False)
        self.pool.release(rec.ue_ip)
        fsm = self._fsm.get(rec.subscriber)
        if fsm is not None and fsm.session_ref == session_id:
            fsm.state = FsmState.DETACHED
        base_bytes, base_charged = self._usage_base.pop(session_id, (0, 0))
        charged = base_charged + self.dataplane.charged.get(session_id, 0)
        counters = {
            d.value: self.dataplane.counters[(session_id, d)].to_dict()
            for d in Direction
            if (session_id, d) in self.dataplane.counters
        }
        self.final_reports[session_id] = {
            "bytes_used": base_bytes + self.dataplane.session_bytes(session_id),
            "charged": charged,
            "counters": counters,
        }
        wallet = self.wallets.pop(session_id, None)
        if wallet is not None:
            wallet.charge_to(charged, now_ms)
            for g in wallet.open_grants():
                self._final_report(g, now_ms)
        self.metrics["detach"] += 1
        self._publish_sessions(now_ms)
        return DetachAck(session_id, True)

    # --- data plane sync ---------------------------------------------------

    def _quota_allowance(self, sid: str, now_ms: int) -> Optional[int]:
        wallet = self.wallets.get(sid)
        if wallet is None:
            return None
        return wallet.authorized(now_ms) - self._usage_base.get(sid, (0, 0))[1]

    def session_objects(self, now_ms: Optional[int] = None) -> dict:
        now = self.dataplane.now_ms if now_ms is None else now_ms
        return {sid: flow_object(rec, self._quota_allowance(sid, now)) for sid, rec in sorted(self.sessions.items())}

    def _publish_sessions(self, now_ms: int) -> None:
        snap = self._session_tx.publish(self.session_objects(now_ms), now_ms)
        if snap is not None:
            self._deliver_dp(snap, now_ms)

    def _deliver_dp(self, snap: DesiredStateSnapshot, now_ms: int) -> None:
        if not self.dataplane_link_up:
            return
        result = self.dataplane.program(snap, now_ms)
        if result.ack is not None:
            self._session_tx.on_ack(result.ack)

    def reconcile_tick(self, now_ms: int) -> None:
        snap = self._session_tx.reconcile_tick(now_ms)
        if snap is not None:
            self._deliver_dp(snap, now_ms)

    @property
    def sessions_in_sync(self) -> bool:
        return not self._session_tx.dirty

    # --- counters, policy phases, quota ----------------------------------

    def counter_tick(self, now_ms: int) -> list[dict]:
        """Fold data-plane counters into session state; returns phase transitions."""
        events = []
        report = self.dataplane.counter_report()["sessions"]
        for sid in sorted(self.sessions):
            rec = self.sessions[sid]
            base_bytes, base_charged = self._usage_base.get(sid, (0, 0))
            row = report.get(sid)
            dp_bytes = (row["uplink"]["bytes"] + row["downlink"]["bytes"]) if row else 0
            dp_charged = row["charged"] if row else 0
            used = base_bytes + dp_bytes
            rec = rec.evolve(bytes_used=used)
            while rec.phase_index < len(rec.policy.phases) - 1:
                ph = rec.phase
                by_bytes = ph.byte_threshold is not None and used - rec.phase_bytes_base >= ph.byte_threshold
                by_time = ph.duration is not None and now_ms - rec.phase_started_ms >= ph.duration
                if not (by_bytes or by_time):
                    break
                rec = rec.evolve(phase_index=rec.phase_index + 1, phase_started_ms=now_ms, phase_bytes_base=used)
                events.append(
                    {
                        "ev": "phase_change",
                        "session": sid,
                        "subscriber": rec.subscriber,
                        "phase_index": rec.phase_index,
                        "bytes_used": used,
                        "rate_bps": rec.phase.rate_limit_bps,
                    }
                )
            wallet = self.wallets.get(sid)
            if wallet is not None:
                unattributed = wallet.charge_to(base_charged + dp_charged, now_ms)
                if unattributed:
                    self.metrics["quota.unattributed_bytes"] += unattributed
                for g in wallet.to_close(now_ms):
                    self._final_report(g, now_ms)
                if wallet.needs_refill(now_ms):
                    self._request_quota(rec, now_ms)
                authorized = wallet.authorized(now_ms)
                rec = rec.evolve(
                    quota_authorized=authorized, quota_remaining=max(0, authorized - wallet.total_used)
                )
            self.sessions[sid] = rec
        self._publish_sessions(now_ms)
        return events

    def _request_quota(self, rec: SessionRecord, now_ms: int) -> None:
        wallet = self.wallets[rec.session_id]
        wallet.request_pending_since = now_ms
        self.outbox.append(
            (
                OCS,
                {
                    "type": "quota_request",
                    "subscriber": rec.subscriber,
                    "agw_id": self.agw_id,
                    "session_id": rec.session_id,
                    "sent_ms": now_ms,
                },
            )
        )

    def _final_report(self, grant, now_ms: int) -> None:
        grant.closed = True
        msg = {"type": "usage_report", "grant_id": grant.grant_id, "used_bytes": grant.used, "final": True}
        self._pending_finals[grant.grant_id] = msg
        self.outbox.append((OCS, dict(msg, sent_ms=now_ms)))

    def charging_tick(self, now_ms: int) -> None:
        """Interim reports keep grants alive; unacked final reports are resent."""
        for sid in sorted(self.wallets):
            for g in self.wallets[sid].open_grants():
                self.outbox.append(
                    (OCS, {"type": "usage_report", "grant_id": g.grant_id, "used_bytes": g.used, "final": False,
                           "sent_ms": now_ms})
                )
        for gid in sorted(self._pending_finals):
            self.outbox.append((OCS, dict(self._pending_finals[gid], sent_ms=now_ms)))

    def on_charging_message(self, msg: dict, now_ms: int = 0) -> None:
        kind = msg["type"]
        sid = msg.get("session_id")
        if kind == "quota_grant":
            wallet = self.wallets.get(sid)
            if wallet is None:
                # session went away while the request was in flight
                self._pending_finals[msg["grant_id"]] = {
                    "type": "usage_report", "grant_id": msg["grant_id"], "used_bytes": 0, "final": True,
                }
                self.outbox.append((OCS, dict(self._pending_finals[msg["grant_id"]], sent_ms=now_ms)))
                return
            wallet.add(msg["grant_id"], msg["granted_bytes"], msg.get("request_sent_ms", now_ms))
            self.metrics["quota.grants"] += 1
            self._refresh_quota(sid, now_ms)
        elif kind == "quota_deny":
            self.metrics["quota.denied"] += 1
        elif kind == "usage_ack":
            if msg.get("final"):
                self._pending_finals.pop(msg["grant_id"], None)
            else:
                for wallet in self.wallets.values():
                    wallet.renew(msg["grant_id"], msg["sent_ms"])

    def _refresh_quota(self, sid: str, now_ms: int) -> None:
        rec = self.sessions[sid]
        wallet = self.wallets[sid]
        authorized = wallet.authorized(now_ms)
        self.sessions[sid] = rec.evolve(
            quota_authorized=authorized, quota_remaining=max(0, authorized - wallet.total_used)
        )
        self._publish_sessions(now_ms)

    # --- checkpoint / restore ----------------------------------------------

    def take_checkpoint(self, now_ms: int = 0) -> Checkpoint:
        return Checkpoint(
            agw_id=self.agw_id,
            taken_at_ms=now_ms,
            sessions=tuple(self.sessions[k] for k in sorted(self.sessions)),
            ip_pool_cursor=self.pool.cursor,
            config_generation=self.config_generation,
            tunnel_cursor=self.tunnel_cursor,
            session_cursor=self.session_cursor,
            config_objects=dict(self._config_rx.objects),
            wallets={sid: w.to_dict() for sid, w in sorted(self.wallets.items())},
        )

    def restore_checkpoint(self, cp: Checkpoint, now_ms: int = 0) -> None:
        if cp.agw_id != self.agw_id:
            raise AgwError(f"checkpoint for {cp.agw_id} cannot restore {self.agw_id}")
        if self.sessions or self._session_tx.generation:
            raise AgwError("restore requires a freshly started gateway")
        self._config_rx.restore(cp.config_generation, cp.config_objects)
        self.cache = SubscriberCache.from_objects(cp.config_generation, cp.config_objects)
        self.sessions = {s.session_id: s for s in cp.sessions}
        self.pool = IpPool(self.ip_pool_network, cp.ip_pool_cursor, [s.ue_ip for s in cp.sessions])
        self.tunnel_cursor = cp.tunnel_cursor
        self.session_cursor = cp.session_cursor
        self.wallets = {
            sid: GrantWallet.from_dict(w, self.quota_size, self.grant_validity_ms) for sid, w in cp.wallets.items()
        }
        self._usage_base = {
            s.session_id: (s.bytes_used, self.wallets[s.session_id].total_used if s.session_id in self.wallets else 0)
            for s in cp.sessions
        }
        self.restarted = True
        self._publish_sessions(now_ms)

    def session_digest(self) -> int:
        return session_set_digest(self.sessions.values())

    # --- telemetry ---------------------------------------------------------

    def checkin(self, now_ms: int) -> dict:
        msg = {
            "type": "checkin",
            "agw_id": self.agw_id,
            "config_generation": self.config_generation,
            "restarted": self.restarted,
            "metrics": [
                {"time_ms": now_ms, "source": self.agw_id, "name": "sessions_active", "value": float(len(self.sessions))},
                {"time_ms": now_ms, "source": self.agw_id, "name": "attach_accepted",
                 "value": float(self.metrics["attach.accepted"])},
            ],
        }
        return msg

    def drain_outbox(self) -> list[tuple[str, dict]]:
        out, self.outbox = self.outbox, []
        return out

    def _check(self) -> None:
        if not self.debug:
            return
        ips = [s.ue_ip for s in self.sessions.values()]
        assert len(ips) == len(set(ips)), "duplicate UE address"
        for s in self.sessions.values():
            assert s.phase_index < len(s.policy.phases)
