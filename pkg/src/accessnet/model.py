"""Shared domain types for the access network.

Every other module speaks in these types.  All of them are immutable once
constructed and serialize to plain JSON-compatible dicts through
``to_dict``/``from_dict``.  Canonical serialization (sorted keys, compact
separators, UTF-8) is what digests and on-disk files are built from.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import json
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, NewType, Optional

SubscriberId = NewType("SubscriberId", str)
PolicyId = NewType("PolicyId", str)

_SUBSCRIBER_ID_RE = re.compile(r"^[0-9]{6,15}$")

AUTH_KEY_BYTES = 16


class AccessTechnology(str, enum.Enum):
    LTE_LIKE = "lte_like"
    WIFI_LIKE = "wifi_like"


class ChargingMode(str, enum.Enum):
    UNLIMITED = "unlimited"
    QUOTA = "quota"


class SessionStatus(str, enum.Enum):
    AUTHENTICATING = "authenticating"
    ACTIVE = "active"
    DETACHED = "detached"


class SnapshotKind(str, enum.Enum):
    CONFIG = "config"
    SESSIONS = "sessions"


def is_valid_subscriber_id(value: object) -> bool:
    return isinstance(value, str) and bool(_SUBSCRIBER_ID_RE.match(value))


def canonical_json(obj: Any) -> bytes:
    """Serialize ``obj`` as canonical UTF-8 JSON (sorted keys, no whitespace)."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


@dataclass(frozen=True)
class PolicyPhase:
    """One phase of a rate/usage policy.

    ``rate_limit_bps`` of 0 means the phase is not metered.  A phase ends
    when ``byte_threshold`` bytes have been used within it, or after
    ``duration`` simulated milliseconds, whichever comes first.
    """

    rate_limit_bps: int
    byte_threshold: Optional[int] = None
    duration: Optional[int] = None

    @property
    def open_ended(self) -> bool:
        return self.byte_threshold is None and self.duration is None

    def to_dict(self) -> dict:
        return {
            "rate_limit_bps": self.rate_limit_bps,
            "byte_threshold": self.byte_threshold,
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PolicyPhase":
        return cls(
            rate_limit_bps=d["rate_limit_bps"],
            byte_threshold=d.get("byte_threshold"),
            duration=d.get("duration"),
        )


@dataclass(frozen=True)
class Policy:
    id: str
    phases: tuple[PolicyPhase, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))

    def to_dict(self) -> dict:
        return {"id": self.id, "phases": [p.to_dict() for p in self.phases]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Policy":
        return cls(id=d["id"], phases=tuple(PolicyPhase.from_dict(p) for p in d["phases"]))

    @classmethod
    def flat(cls, policy_id: str, rate_limit_bps: int) -> "Policy":
        return cls(policy_id, (PolicyPhase(rate_limit_bps),))


@dataclass(frozen=True)
class SubscriberProfile:
    id: str
    auth_key: bytes
    policy_id: str
    allowed_technologies: frozenset[AccessTechnology] = frozenset(
        {AccessTechnology.LTE_LIKE, AccessTechnology.WIFI_LIKE}
    )
    charging_mode: ChargingMode = ChargingMode.UNLIMITED

    def __post_init__(self):
        object.__setattr__(
            self,
            "allowed_technologies",
            frozenset(AccessTechnology(t) for t in self.allowed_technologies),
        )
        object.__setattr__(self, "charging_mode", ChargingMode(self.charging_mode))

    def allows(self, technology: AccessTechnology) -> bool:
        return AccessTechnology(technology) in self.allowed_technologies

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "auth_key": self.auth_key.hex(),
            "policy_id": self.policy_id,
            "allowed_technologies": sorted(t.value for t in self.allowed_technologies),
            "charging_mode": self.charging_mode.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SubscriberProfile":
        return cls(
            id=d["id"],
            auth_key=bytes.fromhex(d["auth_key"]),
            policy_id=d["policy_id"],
            allowed_technologies=frozenset(d.get("allowed_technologies", [t.value for t in AccessTechnology])),
            charging_mode=ChargingMode(d.get("charging_mode", "unlimited")),
        )


@dataclass(frozen=True)
class SessionRecord:
    """Per-UE runtime state held by exactly one AGW."""

    session_id: str
    subscriber: str
    agw_id: str
    ue_ip: str
    tunnel_id: int
    policy: Policy
    technology: AccessTechnology = AccessTechnology.LTE_LIKE
    ran_element_id: str = ""
    phase_index: int = 0
    phase_started_ms: int = 0
    phase_bytes_base: int = 0
    bytes_used: int = 0
    quota_mode: bool = False
    quota_authorized: int = 0
    quota_remaining: int = 0
    status: SessionStatus = SessionStatus.ACTIVE

    def __post_init__(self):
        object.__setattr__(self, "technology", AccessTechnology(self.technology))
        object.__setattr__(self, "status", SessionStatus(self.status))
        if not 0 <= self.phase_index < len(self.policy.phases):
            raise ValueError(f"phase_index {self.phase_index} outside policy {self.policy.id!r}")
        if self.bytes_used < 0 or self.quota_remaining < 0:
            raise ValueError("session counters are non-negative")

    @property
    def phase(self) -> PolicyPhase:
        return self.policy.phases[self.phase_index]

    def evolve(self, **changes) -> "SessionRecord":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "subscriber": self.subscriber,
            "agw_id": self.agw_id,
            "ue_ip": self.ue_ip,
            "tunnel_id": self.tunnel_id,
            "policy": self.policy.to_dict(),
            "technology": self.technology.value,
            "ran_element_id": self.ran_element_id,
            "phase_index": self.phase_index,
            "phase_started_ms": self.phase_started_ms,
            "phase_bytes_base": self.phase_bytes_base,
            "bytes_used": self.bytes_used,
            "quota_mode": self.quota_mode,
            "quota_authorized": self.quota_authorized,
            "quota_remaining": self.quota_remaining,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SessionRecord":
        kw = dict(d)
        kw["policy"] = Policy.from_dict(d["policy"])
        return cls(**kw)


@dataclass(frozen=True)
class DesiredStateSnapshot:
    """Generation-numbered, complete replacement state of one kind."""

    generation: int
    kind: SnapshotKind
    objects: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", SnapshotKind(self.kind))

    def to_dict(self) -> dict:
        return {"generation": self.generation, "kind": self.kind.value, "objects": dict(self.objects)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesiredStateSnapshot":
        return cls(generation=d["generation"], kind=SnapshotKind(d["kind"]), objects=dict(d["objects"]))


@dataclass(frozen=True)
class MetricsSample:
    time_ms: int
    source: str
    name: str
    value: float

    def to_dict(self) -> dict:
        return {"time_ms": self.time_ms, "source": self.source, "name": self.name, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsSample":
        return cls(d["time_ms"], d["source"], d["name"], float(d["value"]))


def objects_digest(objects: Mapping[str, Any]) -> int:
    return digest64(canonical_json(dict(objects)))


def snapshot_digest(snapshot: DesiredStateSnapshot) -> int:
    """64-bit digest of a snapshot's object set; the generation is ignored."""
    return objects_digest(snapshot.objects)


#: Digest of a snapshot with an empty object set.
EMPTY_DIGEST = objects_digest({})


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def add(self, path: str, message: str) -> None:
        self.violations.append(Violation(path, message))

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __len__(self):
        return len(self.violations)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [{"path": v.path, "message": v.message} for v in self.violations]}


def validate_policy(policy: Policy, path: str = "policy", report: Optional[ValidationReport] = None) -> ValidationReport:
    report = report if report is not None else ValidationReport()
    if not isinstance(policy.id, str) or not policy.id:
        report.add(f"{path}.id", "policy id must be a non-empty string")
    if not policy.phases:
        report.add(f"{path}.phases", "policy must have at least one phase")
    last = len(policy.phases) - 1
    for i, ph in enumerate(policy.phases):
        p = f"{path}.phases[{i}]"
        for name in ("rate_limit_bps", "byte_threshold", "duration"):
            v = getattr(ph, name)
            if v is None and name != "rate_limit_bps":
                continue
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                report.add(f"{p}.{name}", "must be a non-negative integer")
        if i != last and ph.open_ended:
            report.add(p, "non-final phase needs byte_threshold or duration")
    return report


def validate_network_config(
    subscribers: Iterable[SubscriberProfile], policies: Iterable[Policy]
) -> ValidationReport:
    """Check a subscriber/policy set for internal consistency.

    Returns a report listing every violated invariant with its path; the
    report is empty iff the configuration is consistent.
    """
    report = ValidationReport()
    policy_ids = set()
    for i, pol in enumerate(policies):
        path = f"policies[{i}]"
        if pol.id in policy_ids:
            report.add(f"{path}.id", f"duplicate policy {pol.id!r}")
        policy_ids.add(pol.id)
        validate_policy(pol, path, report)

    seen = set()
    for i, sub in enumerate(subscribers):
        path = f"subscribers[{i}]"
        if not is_valid_subscriber_id(sub.id):
            report.add(f"{path}.id", "subscriber id must be 6-15 decimal digits")
        if sub.id in seen:
            report.add(f"{path}.id", f"duplicate subscriber {sub.id!r}")
        seen.add(sub.id)
        if len(sub.auth_key) != AUTH_KEY_BYTES:
            report.add(f"{path}.auth_key", f"auth_key must be {AUTH_KEY_BYTES} bytes")
        if not sub.allowed_technologies:
            report.add(f"{path}.allowed_technologies", "must be non-empty")
        if sub.policy_id not in policy_ids:
            report.add(f"{path}.policy_id", f"unknown policy {sub.policy_id!r}")
    return report


def load_subscribers(path) -> list[SubscriberProfile]:
    with open(path, "rb") as fh:
        return [SubscriberProfile.from_dict(d) for d in json.load(fh)]


def load_policies(path) -> list[Policy]:
    with open(path, "rb") as fh:
        return [Policy.from_dict(d) for d in json.load(fh)]


def dump_objects(path, items: Iterable) -> None:
    with open(path, "wb") as fh:
        fh.write(canonical_json([x.to_dict() for x in items]))


class IpPool:
    """Sequential IPv4 allocator over a /16 with lowest-first free-list reuse."""

    def __init__(self, network: str = "10.1.0.0/16", cursor: int = 1, in_use: Iterable[str] = ()):
        self.network = ipaddress.IPv4Network(network)
        if self.network.prefixlen != 16:
            raise ValueError("UE address pools are /16 networks")
        self.cursor = cursor
        self._base = int(self.network.network_address)
        used = {int(ipaddress.IPv4Address(ip)) - self._base for ip in in_use}
        self._free = sorted(set(range(1, cursor)) - used)

    @property
    def capacity(self) -> int:
        return self.network.num_addresses - 2

    def allocate(self) -> str:
        if self._free:
            off = self._free.pop(0)
        else:
            if self.cursor > self.capacity:
                raise RuntimeError("address pool exhausted")
            off = self.cursor
            self.cursor += 1
        return str(ipaddress.IPv4Address(self._base + off))

    def release(self, ip: str) -> None:
        off = int(ipaddress.IPv4Address(ip)) - self._base
        if 0 < off < self.cursor and off not in self._free:
            self._free.append(off)
            self._free.sort()
