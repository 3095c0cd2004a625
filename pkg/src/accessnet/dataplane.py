"""Software match-action data plane for one AGW.

The table is programmed exclusively from sessions-kind desired-state
snapshots.  Each session object yields one uplink and one downlink rule;
meters, quota counters and flow counters are keyed by session id so they
survive reprogramming for sessions that remain in the snapshot.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional

from .model import DesiredStateSnapshot, SnapshotKind, canonical_json, digest64
from .sync import ApplyResult, SyncReceiver

BURST_SECONDS = 0.1


class Direction(str, enum.Enum):
    UPLINK = "uplink"
    DOWNLINK = "downlink"


class DropReason(str, enum.Enum):
    NO_MATCH = "no_match"
    RATE_LIMITED = "rate_limited"
    QUOTA_EXHAUSTED = "quota_exhausted"


@dataclass(frozen=True)
class SimPacket:
    src_ip: str
    dst_ip: str
    size_bytes: int
    tunnel_id: Optional[int] = None
    timestamp_ms: float = 0

    def __post_init__(self):
        if self.size_bytes < 1:
            raise ValueError("packets carry at least one byte")


@dataclass(frozen=True)
class ForwardResult:
    forwarded: bool
    size: int
    reason: Optional[DropReason] = None
    session_id: Optional[str] = None
    packet: Optional[SimPacket] = None


class TokenBucket:
    """Byte token bucket refilled continuously at ``rate_bps / 8`` bytes per second."""

    def __init__(self, rate_bps: int, burst_bytes: Optional[float] = None, now_ms: float = 0):
        self.rate_bps = rate_bps
        self.burst_bytes = default_burst(rate_bps) if burst_bytes is None else burst_bytes
        self.tokens = float(self.burst_bytes)
        self.last_refill_ms = now_ms

    def refill(self, now_ms: float) -> None:
        if now_ms > self.last_refill_ms:
            self.tokens = min(self.burst_bytes, self.tokens + (now_ms - self.last_refill_ms) * self.rate_bps / 8000.0)
            self.last_refill_ms = now_ms

    def conforms(self, size: int, now_ms: float) -> bool:
        self.refill(now_ms)
        return self.tokens >= size

    def consume(self, size: int, now_ms: float) -> bool:
        self.refill(now_ms)
        if self.tokens < size:
            return False
        self.tokens -= size
        return True

    def set_rate(self, rate_bps: int, now_ms: float, burst_bytes: Optional[float] = None) -> None:
        self.refill(now_ms)
        self.rate_bps = rate_bps
        self.burst_bytes = default_burst(rate_bps) if burst_bytes is None else burst_bytes
        self.tokens = min(self.tokens, self.burst_bytes)


def default_burst(rate_bps: int) -> float:
    return rate_bps / 8 * BURST_SECONDS


@dataclass(frozen=True)
class FlowRule:
    ue_ip: str
    direction: Direction
    actions: tuple
    session_id: str

    def to_dict(self) -> dict:
        return {
            "match": {"ue_ip": self.ue_ip, "direction": self.direction.value},
            "actions": [list(a) for a in self.actions],
            "session_id": self.session_id,
        }


@dataclass
class FlowCounters:
    packets: int = 0
    bytes: int = 0
    dropped_packets: int = 0
    dropped_bytes: int = 0
    drops: dict = field(default_factory=dict)

    def copy(self) -> "FlowCounters":
        return replace(self, drops=dict(self.drops))

    def to_dict(self) -> dict:
        return {
            "packets": self.packets,
            "bytes": self.bytes,
            "dropped_packets": self.dropped_packets,
            "dropped_bytes": self.dropped_bytes,
            "drops": dict(self.drops),
        }


def rules_for(obj: Mapping[str, Any]) -> tuple[FlowRule, FlowRule]:
    """Uplink and downlink rules for one session object."""
    sid = obj["session_id"]
    tid = obj.get("tunnel_id")
    metered = obj.get("rate_bps", 0) > 0
    up = []
    if tid is not None:
        up.append(("decap", tid))
    if metered:
        up.append(("meter", sid))
    up += [("count",), ("forward",)]
    down = [("meter", sid)] if metered else []
    down.append(("count",))
    if tid is not None:
        down.append(("encap", tid))
    down.append(("forward",))
    return (
        FlowRule(obj["ue_ip"], Direction.UPLINK, tuple(up), sid),
        FlowRule(obj["ue_ip"], Direction.DOWNLINK, tuple(down), sid),
    )


class Dataplane:
    def __init__(self, agw_id: str = ""):
        self.agw_id = agw_id
        self._rx = SyncReceiver(SnapshotKind.SESSIONS)
        self.table: dict[tuple[str, Direction], FlowRule] = {}
        self.sessions: dict[str, dict] = {}
        self.meters: dict[str, TokenBucket] = {}
        self.counters: dict[tuple[str, Direction], FlowCounters] = {}
        self.charged: dict[str, int] = {}
        self.retired: dict[str, dict] = {}
        self.now_ms: float = 0

    @property
    def generation(self) -> int:
        return self._rx.last_applied_generation

    def program(self, snapshot: DesiredStateSnapshot, now_ms: Optional[float] = None) -> ApplyResult:
        result = self._rx.receiver_apply(snapshot)
        if not result.applied:
            return result
        now = self.now_ms if now_ms is None else now_ms
        new_sessions = {o["session_id"]: dict(o) for o in self._rx.objects.values()}
        for sid in list(self.sessions):
            if sid not in new_sessions:
                self._retire(sid)
        table = {}
        for sid, obj in sorted(new_sessions.items()):
            for rule in rules_for(obj):
                table[(rule.ue_ip, rule.direction)] = rule
                self.counters.setdefault((sid, rule.direction), FlowCounters())
            self.charged.setdefault(sid, 0)
            rate = obj.get("rate_bps", 0)
            meter = self.meters.get(sid)
            if rate > 0:
                if meter is None:
                    self.meters[sid] = TokenBucket(rate, now_ms=now)
                elif meter.rate_bps != rate:
                    meter.set_rate(rate, now)
            elif meter is not None:
                del self.meters[sid]
        self.table = table
        self.sessions = new_sessions
        return result

    def _retire(self, sid: str) -> None:
        final = {d.value: self.counters.pop((sid, d), FlowCounters()).to_dict() for d in Direction}
        final["charged"] = self.charged.pop(sid, 0)
        self.retired[sid] = final
        self.meters.pop(sid, None)

    def pop_retired(self) -> dict[str, dict]:
        out, self.retired = self.retired, {}
        return out

    def _drop(self, counters: Optional[FlowCounters], reason: DropReason, size: int, sid=None) -> ForwardResult:
        if counters is not None:
            counters.dropped_packets += 1
            counters.dropped_bytes += size
            counters.drops[reason.value] = counters.drops.get(reason.value, 0) + size
        return ForwardResult(False, size, reason, sid)

    def forward(self, packet: SimPacket, direction: Direction) -> ForwardResult:
        direction = Direction(direction)
        now = packet.timestamp_ms
        self.now_ms = max(self.now_ms, now)
        ue_ip = packet.src_ip if direction is Direction.UPLINK else packet.dst_ip
        rule = self.table.get((ue_ip, direction))
        if rule is None:
            return self._drop(None, DropReason.NO_MATCH, packet.size_bytes)
        sid = rule.session_id
        size = packet.size_bytes
        tid = self.sessions[sid].get("tunnel_id")
        if direction is Direction.UPLINK and packet.tunnel_id != tid:
            return self._drop(None, DropReason.NO_MATCH, size)
        counters = self.counters[(sid, direction)]
        quota = self.sessions[sid].get("quota_authorized")
        if quota is not None and self.charged[sid] + size > quota:
            return self._drop(counters, DropReason.QUOTA_EXHAUSTED, size, sid)
        out = packet
        for action in rule.actions:
            op = action[0]
            if op == "decap":
                out = replace(out, tunnel_id=None)
            elif op == "meter":
                if not self.meters[sid].consume(size, now):
                    return self._drop(counters, DropReason.RATE_LIMITED, size, sid)
            elif op == "count":
                self.charged[sid] += size
                counters.packets += 1
                counters.bytes += size
            elif op == "encap":
                out = replace(out, tunnel_id=action[1])
        return ForwardResult(True, size, None, sid, out)

    def read_counters(self) -> dict[tuple[str, Direction], FlowCounters]:
        return {k: v.copy() for k, v in self.counters.items()}

    def session_bytes(self, sid: str) -> int:
        return sum(self.counters[(sid, d)].bytes for d in Direction if (sid, d) in self.counters)

    def counter_report(self) -> dict:
        return {
            "type": "counter_report",
            "agw_id": self.agw_id,
            "generation": self.generation,
            "sessions": {
                sid: {d.value: self.counters[(sid, d)].to_dict() for d in Direction} | {"charged": self.charged[sid]}
                for sid in sorted(self.sessions)
            },
        }

    def table_digest(self) -> int:
        return table_digest(self.table.values())


def table_digest(rules) -> int:
    return digest64(canonical_json(sorted((r.to_dict() for r in rules), key=canonical_json)))
