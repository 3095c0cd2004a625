"""Desired-state synchronization between a state owner and a receiver.

The owner always sends the complete current state, stamped with a
generation number.  The receiver replaces its state wholesale whenever a
snapshot newer than the last one it applied arrives, and acknowledges with
``(generation, digest)``.  Anything lost, duplicated or reordered on the
way is repaired by the next (re)transmission.

``CrudOwner``/``CrudReceiver`` implement the incremental create/update/delete
alternative.  They exist only as a baseline for differential tests.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .model import (
    EMPTY_DIGEST,
    DesiredStateSnapshot,
    SnapshotKind,
    canonical_json,
    objects_digest,
)

log = logging.getLogger(__name__)

DEFAULT_RESEND_INTERVAL_MS = 5_000


class Role(str, enum.Enum):
    OWNER = "owner"
    RECEIVER = "receiver"


class ApplyStatus(str, enum.Enum):
    APPLIED = "applied"
    STALE_IGNORED = "stale_ignored"
    REJECTED = "rejected"


@dataclass(frozen=True)
class Ack:
    kind: SnapshotKind
    generation: int
    digest: int

    def to_dict(self) -> dict:
        return {"kind": SnapshotKind(self.kind).value, "ack": {"generation": self.generation, "digest": self.digest}}


@dataclass(frozen=True)
class ApplyResult:
    status: ApplyStatus
    ack: Optional[Ack] = None
    warning: Optional[str] = None

    @property
    def applied(self) -> bool:
        return self.status is ApplyStatus.APPLIED


@dataclass(frozen=True)
class SyncEndpointState:
    role: Role
    generation: int
    last_acked_digest: Optional[int]
    dirty: bool


class SyncOwner:
    """Sending side of one desired-state stream (one kind, one receiver)."""

    def __init__(self, kind: SnapshotKind, resend_interval_ms: int = DEFAULT_RESEND_INTERVAL_MS):
        self.kind = SnapshotKind(kind)
        self.resend_interval_ms = resend_interval_ms
        self.generation = 0
        self.latest: Optional[DesiredStateSnapshot] = None
        self.latest_digest: Optional[int] = None
        self.last_acked_generation = 0
        self.last_acked_digest: Optional[int] = None
        self.last_sent_ms: Optional[int] = None
        self.dirty = False

    @property
    def state(self) -> SyncEndpointState:
        return SyncEndpointState(Role.OWNER, self.generation, self.last_acked_digest, self.dirty)

    def publish(
        self, objects: Mapping[str, Any], now_ms: int = 0, generation: Optional[int] = None
    ) -> Optional[DesiredStateSnapshot]:
        """Emit a full snapshot of ``objects`` if it differs from the last one.

        ``generation`` lets a caller that keeps its own durable counter (the
        orchestrator's config store) stamp snapshots with it; it must move
        forward.
        """
        digest = objects_digest(objects)
        if self.latest is not None and digest == self.latest_digest:
            return None
        if generation is None:
            generation = self.generation + 1
        if generation <= self.generation:
            raise ValueError(f"generation must increase ({generation} <= {self.generation})")
        self.generation = generation
        self.latest = DesiredStateSnapshot(generation, self.kind, dict(objects))
        self.latest_digest = digest
        self.dirty = True
        self.last_sent_ms = now_ms
        return self.latest

    def on_ack(self, ack: Ack) -> bool:
        """Record an ack; return True if it made the endpoint clean."""
        if ack.generation < self.last_acked_generation:
            return False
        self.last_acked_generation = ack.generation
        self.last_acked_digest = ack.digest
        if ack.generation == self.generation and ack.digest == self.latest_digest:
            self.dirty = False
            return True
        if ack.generation == self.generation:
            log.warning("%s ack digest mismatch at generation %d", self.kind.value, ack.generation)
        return False

    def mark_dirty(self) -> None:
        """Force a resend on the next tick (e.g. the receiver restarted)."""
        if self.latest is not None:
            self.dirty = True
            self.last_sent_ms = None

    def reconcile_tick(self, now_ms: int) -> Optional[DesiredStateSnapshot]:
        if not self.dirty or self.latest is None:
            return None
        if self.last_sent_ms is not None and now_ms - self.last_sent_ms < self.resend_interval_ms:
            return None
        self.last_sent_ms = now_ms
        return self.latest


class SyncReceiver:
    """Receiving side: applies only strictly newer generations."""

    def __init__(self, kind: SnapshotKind):
        self.kind = SnapshotKind(kind)
        self.last_applied_generation = 0
        self.objects: dict[str, Any] = {}
        self.digest = EMPTY_DIGEST
        self.rejected = 0
        self.applied_generations: list[int] = []

    @property
    def state(self) -> SyncEndpointState:
        return SyncEndpointState(Role.RECEIVER, self.last_applied_generation, self.digest, False)

    def current_ack(self) -> Ack:
        return Ack(self.kind, self.last_applied_generation, self.digest)

    def receiver_apply(self, snapshot: Any) -> ApplyResult:
        problem = _snapshot_problem(snapshot, self.kind)
        if problem:
            self.rejected += 1
            log.warning("rejected %s snapshot: %s", self.kind.value, problem)
            return ApplyResult(ApplyStatus.REJECTED, warning=problem)
        if snapshot.generation <= self.last_applied_generation:
            # re-ack so an owner whose ack was lost can go clean
            return ApplyResult(ApplyStatus.STALE_IGNORED, ack=self.current_ack())
        self.objects = dict(snapshot.objects)
        self.digest = objects_digest(self.objects)
        self.last_applied_generation = snapshot.generation
        self.applied_generations.append(snapshot.generation)
        return ApplyResult(ApplyStatus.APPLIED, ack=self.current_ack())

    apply = receiver_apply

    def restore(self, generation: int, objects: Mapping[str, Any]) -> None:
        self.objects = dict(objects)
        self.digest = objects_digest(self.objects)
        self.last_applied_generation = generation


def _snapshot_problem(snapshot: Any, kind: SnapshotKind) -> Optional[str]:
    if not isinstance(snapshot, DesiredStateSnapshot):
        return "not a snapshot"
    if snapshot.kind is not kind:
        return f"kind {snapshot.kind.value} on a {kind.value} stream"
    if not isinstance(snapshot.generation, int) or isinstance(snapshot.generation, bool) or snapshot.generation < 1:
        return "generation must be a positive integer"
    if snapshot.generation >= 2**63:
        return "generation out of 64-bit range"
    if not isinstance(snapshot.objects, Mapping) or not all(isinstance(k, str) for k in snapshot.objects):
        return "objects must be a string-keyed mapping"
    try:
        canonical_json(dict(snapshot.objects))
    except (TypeError, ValueError) as exc:
        return f"objects not serializable: {exc}"
    return None


# --- CRUD baseline -----------------------------------------------------------


class CrudOp(str, enum.Enum):
    CREATE = "create"
    UPDATE = "update"
    DELETE = "delete"


@dataclass(frozen=True)
class CrudDelta:
    op: CrudOp
    key: str
    object: Any = None


class CrudOwner:
    """Tracks what the sender believes the receiver holds."""

    def __init__(self):
        self.believed: dict[str, Any] = {}

    def create(self, key: str, obj: Any) -> CrudDelta:
        self.believed[key] = obj
        return CrudDelta(CrudOp.CREATE, key, obj)

    def update(self, key: str, obj: Any) -> CrudDelta:
        self.believed[key] = obj
        return CrudDelta(CrudOp.UPDATE, key, obj)

    def delete(self, key: str) -> CrudDelta:
        self.believed.pop(key, None)
        return CrudDelta(CrudOp.DELETE, key)


@dataclass
class CrudReceiver:
    objects: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def crud_apply(self, delta: CrudDelta) -> ApplyResult:
        op = CrudOp(delta.op)
        warning = None
        if op is CrudOp.CREATE:
            if delta.key in self.objects:
                warning = f"create of existing key {delta.key!r}"
            self.objects[delta.key] = delta.object
        elif delta.key not in self.objects:
            warning = f"{op.value} of unknown key {delta.key!r}"
        elif op is CrudOp.UPDATE:
            self.objects[delta.key] = delta.object
        else:
            del self.objects[delta.key]
        if warning:
            self.warnings.append(warning)
            log.warning("crud: %s", warning)
            return ApplyResult(ApplyStatus.STALE_IGNORED, warning=warning)
        return ApplyResult(ApplyStatus.APPLIED)

    apply = crud_apply

    @property
    def digest(self) -> int:
        return objects_digest(self.objects)


# --- wire format -------------------------------------------------------------

_LEN = struct.Struct(">I")


def snapshot_envelope(snapshot: DesiredStateSnapshot) -> dict:
    return {"kind": snapshot.kind.value, "generation": snapshot.generation, "objects": dict(snapshot.objects)}


def encode_envelope(message: "DesiredStateSnapshot | Ack | Mapping") -> bytes:
    """Length-prefixed canonical JSON frame for a snapshot or an ack."""
    if isinstance(message, DesiredStateSnapshot):
        body = snapshot_envelope(message)
    elif isinstance(message, Ack):
        body = message.to_dict()
    else:
        body = dict(message)
    payload = canonical_json(body)
    return _LEN.pack(len(payload)) + payload


def decode_envelope(frame: bytes) -> "DesiredStateSnapshot | Ack":
    if len(frame) < _LEN.size:
        raise ValueError("short frame")
    (n,) = _LEN.unpack_from(frame)
    payload = frame[_LEN.size :]
    if len(payload) != n:
        raise ValueError(f"frame length {len(payload)} != header {n}")
    body = json.loads(payload.decode("utf-8"))
    kind = SnapshotKind(body["kind"])
    if "ack" in body:
        return Ack(kind, body["ack"]["generation"], body["ack"]["digest"])
    return DesiredStateSnapshot(body["generation"], kind, body["objects"])


def split_frames(stream: bytes) -> list[bytes]:
    frames, i = [], 0
    while i < len(stream):
        (n,) = _LEN.unpack_from(stream, i)
        frames.append(stream[i : i + _LEN.size + n])
        i += _LEN.size + n
    return frames
