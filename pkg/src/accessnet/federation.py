"""Federation gateway for local-breakout roaming.

The FeG is the single point where control-plane lookups leave this network
for an external operator core.  Profiles it fetches are cached for a TTL;
the AGW then enforces the returned policy locally and user traffic never
passes through the FeG.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional

from .model import Policy

DEFAULT_TTL_MS = 300_000
DEFAULT_LOOKUP_TIMEOUT_MS = 2_000


class FederationMode(str, enum.Enum):
    STANDALONE = "standalone"
    LOCAL_BREAKOUT = "local_breakout"


@dataclass(frozen=True)
class FederatedProfile:
    subscriber: str
    auth_key: bytes
    policy: Policy

    def to_dict(self) -> dict:
        return {"subscriber": self.subscriber, "auth_key": self.auth_key.hex(), "policy": self.policy.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "FederatedProfile":
        return cls(d["subscriber"], bytes.fromhex(d["auth_key"]), Policy.from_dict(d["policy"]))


@dataclass(frozen=True)
class NotFound:
    subscriber: str
    reason: str = "unknown"


@dataclass
class ExternalCoreStub:
    """Directory of another operator's subscribers, with a latency and outage schedule."""

    directory: dict[str, FederatedProfile] = field(default_factory=dict)
    latency_ms: int = 50
    down_windows: list[tuple[int, int]] = field(default_factory=list)
    requests: list[tuple[int, str, str]] = field(default_factory=list)

    def available(self, now_ms: int) -> bool:
        return not any(a <= now_ms < b for a, b in self.down_windows)

    def query(self, subscriber: str, now_ms: int, origin: str) -> "FederatedProfile | NotFound":
        self.requests.append((now_ms, origin, subscriber))
        if not self.available(now_ms):
            return NotFound(subscriber, "unavailable")
        return self.directory.get(subscriber) or NotFound(subscriber, "unknown")

    @classmethod
    def load(cls, path, **kw) -> "ExternalCoreStub":
        with open(path, "rb") as fh:
            rows = json.load(fh)
        return cls({r["subscriber"]: FederatedProfile.from_dict(r) for r in rows}, **kw)


class Feg:
    NAME = "feg"

    def __init__(self, core: ExternalCoreStub, ttl_ms: int = DEFAULT_TTL_MS, timeout_ms: int = DEFAULT_LOOKUP_TIMEOUT_MS):
        self.core = core
        self.ttl_ms = ttl_ms
        self.timeout_ms = timeout_ms
        self._cache: dict[str, tuple[int, FederatedProfile]] = {}
        self.hits = 0
        self.misses = 0

    def cached(self, subscriber: str, now_ms: int) -> Optional[FederatedProfile]:
        entry = self._cache.get(subscriber)
        if entry is not None and now_ms - entry[0] < self.ttl_ms:
            return entry[1]
        return None

    def begin_lookup(self, subscriber: str, now_ms: int) -> tuple[int, "FederatedProfile | NotFound"]:
        """Resolve a lookup; returns (time the answer is ready, answer)."""
        hit = self.cached(subscriber, now_ms)
        if hit is not None:
            self.hits += 1
            return now_ms, hit
        self.misses += 1
        answer = self.core.query(subscriber, now_ms, origin=self.NAME)
        if isinstance(answer, NotFound) and answer.reason == "unavailable":
            return now_ms + self.timeout_ms, answer
        if self.core.latency_ms > self.timeout_ms:
            return now_ms + self.timeout_ms, NotFound(subscriber, "unavailable")
        ready = now_ms + self.core.latency_ms
        if isinstance(answer, FederatedProfile):
            self._cache[subscriber] = (ready, answer)
        return ready, answer

    def feg_lookup(self, subscriber: str, now_ms: int = 0) -> "FederatedProfile | NotFound":
        return self.begin_lookup(subscriber, now_ms)[1]
