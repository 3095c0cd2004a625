"""Central orchestrator: durable config store, northbound API, config push.

All mutations go through :meth:`Orchestrator._mutate`, which holds the single
writer lock, validates, bumps the store generation, persists atomically and
then publishes a fresh config snapshot toward every registered AGW.
Delivery to AGWs is asynchronous: published snapshots accumulate in an
outbound queue that the transport (the simulator, or a test) drains.
"""

from __future__ import annotations

import copy
import json
import os
import tempfile
import threading
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable, Optional
from urllib.parse import parse_qs, urlparse

from .model import (
    MetricsSample,
    Policy,
    SnapshotKind,
    SubscriberProfile,
    ValidationReport,
    canonical_json,
    digest64,
    validate_network_config,
    validate_policy,
)
from .sync import DEFAULT_RESEND_INTERVAL_MS, Ack, SyncOwner

DEFAULT_METRICS_CAPACITY = 100_000
DEFAULT_CHECKIN_TIMEOUT_MS = 3_000


class OrchestratorError(Exception):
    status = 400

    def __init__(self, message: str, report: Optional[ValidationReport] = None):
        super().__init__(message)
        self.report = report

    def to_dict(self) -> dict:
        body = {"error": str(self)}
        if self.report is not None:
            body["report"] = self.report.to_dict()
        return body


class ValidationFailed(OrchestratorError):
    status = 400


class Duplicate(OrchestratorError):
    status = 409


class NotFoundError(OrchestratorError):
    status = 404


@dataclass(frozen=True)
class AgwDescriptor:
    agw_id: str
    ip_pool: str
    attached_ran_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"agw_id": self.agw_id, "ip_pool": self.ip_pool, "attached_ran_ids": sorted(self.attached_ran_ids)}

    @classmethod
    def from_dict(cls, d) -> "AgwDescriptor":
        return cls(d["agw_id"], d["ip_pool"], tuple(d.get("attached_ran_ids", ())))


@dataclass
class ConfigStore:
    subscribers: dict[str, SubscriberProfile] = field(default_factory=dict)
    policies: dict[str, Policy] = field(default_factory=dict)
    agw_registry: dict[str, AgwDescriptor] = field(default_factory=dict)
    generation: int = 0

    def config_objects(self) -> dict:
        objs = {f"subscriber/{k}": v.to_dict() for k, v in self.subscribers.items()}
        objs.update({f"policy/{k}": v.to_dict() for k, v in self.policies.items()})
        objs.update({f"agw/{k}": v.to_dict() for k, v in self.agw_registry.items()})
        return objs

    def to_dict(self) -> dict:
        return {"generation": self.generation, "objects": self.config_objects()}

    @classmethod
    def from_dict(cls, d) -> "ConfigStore":
        store = cls(generation=d["generation"])
        for key, obj in d["objects"].items():
            kind, _, name = key.partition("/")
            if kind == "subscriber":
                store.subscribers[name] = SubscriberProfile.from_dict(obj)
            elif kind == "policy":
                store.policies[name] = Policy.from_dict(obj)
            elif kind == "agw":
                store.agw_registry[name] = AgwDescriptor.from_dict(obj)
            else:
                raise ValueError(f"unknown store object {key!r}")
        return store

    def digest(self) -> int:
        return digest64(canonical_json(self.to_dict()))

    def save(self, path) -> None:
        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(prefix=".store-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(canonical_json(self.to_dict()))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "ConfigStore":
        with open(path, "rb") as fh:
            return cls.from_dict(json.load(fh))


class MetricsStore:
    """Bounded per-source ring buffers; the oldest samples fall off when full."""

    def __init__(self, capacity: int = DEFAULT_METRICS_CAPACITY):
        self.capacity = capacity
        self._rings: dict[str, deque] = {}
        self.dropped = 0

    def add(self, sample: MetricsSample) -> None:
        ring = self._rings.get(sample.source)
        if ring is None:
            ring = self._rings[sample.source] = deque(maxlen=self.capacity)
        if len(ring) == self.capacity:
            self.dropped += 1
        ring.append(sample)

    def extend(self, samples: Iterable[MetricsSample]) -> None:
        for s in samples:
            self.add(s)

    def query(self, source=None, name=None, from_ms=None, to_ms=None) -> list[MetricsSample]:
        out = []
        for src in sorted(self._rings):
            if source is not None and src != source:
                continue
            for s in self._rings[src]:
                if name is not None and s.name != name:
                    continue
                if from_ms is not None and s.time_ms < from_ms:
                    continue
                if to_ms is not None and s.time_ms >= to_ms:
                    continue
                out.append(s)
        return out

    def __len__(self):
        return sum(len(r) for r in self._rings.values())


@dataclass
class _AgwLink:
    owner: SyncOwner
    last_contact_ms: Optional[int] = None
    cache_generation: int = 0


class Orchestrator:
    def __init__(
        self,
        store: Optional[ConfigStore] = None,
        path=None,
        resend_interval_ms: int = DEFAULT_RESEND_INTERVAL_MS,
        checkin_timeout_ms: int = DEFAULT_CHECKIN_TIMEOUT_MS,
        metrics_capacity: int = DEFAULT_METRICS_CAPACITY,
    ):
        self.path = path
        if store is None:
            store = ConfigStore.load(path) if path is not None and os.path.exists(path) else ConfigStore()
        self.store = store
        self.resend_interval_ms = resend_interval_ms
        self.checkin_timeout_ms = checkin_timeout_ms
        self.metrics = MetricsStore(metrics_capacity)
        self.now_ms = 0
        self._lock = threading.RLock()
        self._links: dict[str, _AgwLink] = {}
        self.outbound: list[tuple[str, object]] = []
        for agw_id in sorted(self.store.agw_registry):
            self._link(agw_id)
        self._publish_all()

    # --- internals ------------------------------------------------------

    def _link(self, agw_id: str) -> _AgwLink:
        link = self._links.get(agw_id)
        if link is None:
            link = self._links[agw_id] = _AgwLink(SyncOwner(SnapshotKind.CONFIG, self.resend_interval_ms))
        return link

    def _publish_all(self) -> None:
        if self.store.generation == 0:
            return
        objects = self.store.config_objects()
        for agw_id in sorted(self._links):
            owner = self._links[agw_id].owner
            if owner.generation < self.store.generation:
                snap = owner.publish(objects, self.now_ms, generation=self.store.generation)
                if snap is not None:
                    self.outbound.append((agw_id, snap))

    def _mutate(self, change: Callable[[ConfigStore], None]) -> int:
        with self._lock:
            candidate = copy.deepcopy(self.store)
            change(candidate)
            report = validate_network_config(candidate.subscribers.values(), candidate.policies.values())
            if not report.ok:
                raise ValidationFailed("configuration invalid", report)
            candidate.generation = self.store.generation + 1
            if self.path is not None:
                candidate.save(self.path)
            self.store = candidate
            for agw_id in candidate.agw_registry:
                self._link(agw_id)
            self._publish_all()
            return candidate.generation

    # --- northbound operations -----------------------------------------

    def add_subscriber(self, profile: SubscriberProfile) -> int:
        def change(store: ConfigStore):
            if profile.id in store.subscribers:
                raise Duplicate(f"duplicate subscriber {profile.id}")
            store.subscribers[profile.id] = profile

        return self._mutate(change)

    def remove_subscriber(self, subscriber_id: str) -> int:
        def change(store: ConfigStore):
            if subscriber_id not in store.subscribers:
                raise NotFoundError(f"no subscriber {subscriber_id}")
            del store.subscribers[subscriber_id]

        return self._mutate(change)

    def upsert_policy(self, policy: Policy) -> int:
        report = validate_policy(policy)
        if not report.ok:
            raise ValidationFailed("invalid policy", report)

        def change(store: ConfigStore):
            store.policies[policy.id] = policy

        return self._mutate(change)

    def register_agw(self, desc: AgwDescriptor) -> int:
        def change(store: ConfigStore):
            if desc.agw_id in store.agw_registry and store.agw_registry[desc.agw_id] == desc:
                raise Duplicate(f"agw {desc.agw_id} already registered")
            store.agw_registry[desc.agw_id] = desc

        return self._mutate(change)

    def subscribers(self) -> list[SubscriberProfile]:
        with self._lock:
            return [self.store.subscribers[k] for k in sorted(self.store.subscribers)]

    def policies(self) -> list[Policy]:
        with self._lock:
            return [self.store.policies[k] for k in sorted(self.store.policies)]

    def list_agws(self, now_ms: Optional[int] = None) -> list[dict]:
        now = self.now_ms if now_ms is None else now_ms
        with self._lock:
            rows = []
            for agw_id in sorted(self.store.agw_registry):
                link = self._links[agw_id]
                connected = link.last_contact_ms is not None and now - link.last_contact_ms <= self.checkin_timeout_ms
                rows.append(
                    {
                        "agw_id": agw_id,
                        "last_acked_generation": link.owner.last_acked_generation,
                        "connected": connected,
                        "in_sync": not link.owner.dirty and link.owner.generation == self.store.generation,
                    }
                )
            return rows

    def record_metrics(self, samples: Iterable[MetricsSample]) -> None:
        self.metrics.extend(samples)

    def get_metrics(self, source=None, name=None, window=(None, None)) -> list[MetricsSample]:
        return self.metrics.query(source, name, *window)

    # --- southbound (AGW-facing) ---------------------------------------

    def drain_outbound(self) -> list[tuple[str, object]]:
        with self._lock:
            out, self.outbound = self.outbound, []
            return out

    def reconcile_tick(self, now_ms: int) -> list[tuple[str, object]]:
        with self._lock:
            self.now_ms = now_ms
            out = []
            for agw_id in sorted(self._links):
                snap = self._links[agw_id].owner.reconcile_tick(now_ms)
                if snap is not None:
                    out.append((agw_id, snap))
            return out

    def on_ack(self, agw_id: str, ack: Ack, now_ms: int) -> None:
        with self._lock:
            link = self._link(agw_id)
            link.last_contact_ms = now_ms
            link.owner.on_ack(ack)

    def on_checkin(self, agw_id: str, message: dict, now_ms: int) -> list[tuple[str, object]]:
        """Handle an AGW check-in; resend config at once if the AGW is behind."""
        with self._lock:
            self.now_ms = max(self.now_ms, now_ms)
            link = self._link(agw_id)
            link.last_contact_ms = now_ms
            link.cache_generation = message.get("config_generation", 0)
            samples = [MetricsSample.from_dict(m) for m in message.get("metrics", ())]
            self.metrics.extend(samples)
            owner = link.owner
            if owner.latest is None:
                return []
            if message.get("restarted") or link.cache_generation != owner.generation:
                owner.mark_dirty()
                snap = owner.reconcile_tick(now_ms)
                return [(agw_id, snap)] if snap is not None else []
            return []


# --- HTTP-style northbound API ----------------------------------------------


class NorthboundApi:
    """Request/response router; usable in-process or behind an HTTP server."""

    def __init__(self, orchestrator: Orchestrator):
        self.orch = orchestrator

    def handle(self, method: str, path: str, body=None) -> tuple[int, dict]:
        url = urlparse(path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        try:
            if isinstance(body, (bytes, str)):
                body = json.loads(body) if body else None
            return 200, self._route(method.upper(), parts, query, body)
        except OrchestratorError as exc:
            return exc.status, exc.to_dict()
        except (KeyError, TypeError, ValueError) as exc:
            return 400, {"error": f"bad request: {exc}"}

    def _route(self, method, parts, query, body) -> dict:
        orch = self.orch
        if parts == ["subscribers"] and method == "POST":
            return {"generation": orch.add_subscriber(SubscriberProfile.from_dict(body))}
        if parts == ["subscribers"] and method == "GET":
            return {"subscribers": [s.to_dict() for s in orch.subscribers()]}
        if len(parts) == 2 and parts[0] == "subscribers" and method == "DELETE":
            return {"generation": orch.remove_subscriber(parts[1])}
        if len(parts) == 2 and parts[0] == "policies" and method == "PUT":
            body = dict(body)
            body.setdefault("id", parts[1])
            if body["id"] != parts[1]:
                raise ValidationFailed("policy id in path and body differ")
            return {"generation": orch.upsert_policy(Policy.from_dict(body))}
        if parts == ["policies"] and method == "GET":
            return {"policies": [p.to_dict() for p in orch.policies()]}
        if parts == ["agws"] and method == "GET":
            return {"agws": orch.list_agws()}
        if parts == ["agws"] and method == "POST":
            return {"generation": orch.register_agw(AgwDescriptor.from_dict(body))}
        if parts == ["metrics"] and method == "GET":
            window = (
                int(query["from_ms"]) if query.get("from_ms") else None,
                int(query["to_ms"]) if query.get("to_ms") else None,
            )
            samples = orch.get_metrics(query.get("source") or None, query.get("name") or None, window)
            return {"metrics": [s.to_dict() for s in samples]}
        raise NotFoundError(f"no route {method} /{'/'.join(parts)}")


def make_http_server(api: NorthboundApi, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def _serve(self):
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else None
            status, payload = api.handle(self.command, self.path, body)
            data = canonical_json(payload)
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        do_GET = do_POST = do_PUT = do_DELETE = _serve

        def log_message(self, fmt, *args):
            pass

    return ThreadingHTTPServer((host, port), Handler)
