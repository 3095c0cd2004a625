"""Online charging system emulator and the AGW-side grant wallet.

The OCS debits an account when it issues a quota grant and refunds the
unused remainder when the grant is closed, either by a final usage report
or by timing out.  An AGW holds grants in a :class:`GrantWallet`, which
charges forwarded bytes against them in FIFO order and stops honouring a
grant once its validity lapses.  Validity runs from the *send* time of the
last acknowledged report, while the OCS times a grant out from the
*receive* time of the last contact, so a grant is never reclaimed while the
AGW may still spend it.  Usage that was spent but not yet reported when a
grant timed out is charged as debt once the late report arrives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

log = logging.getLogger(__name__)

DEFAULT_QUOTA_SIZE = 1_000_000
DEFAULT_GRANT_TIMEOUT_MS = 60_000
REFILL_FRACTION = 0.2


@dataclass
class QuotaGrant:
    grant_id: str
    subscriber: str
    agw_id: str
    granted_bytes: int
    reported_used: int = 0
    issued_ms: int = 0
    last_contact_ms: int = 0

    def to_dict(self) -> dict:
        return {
            "type": "quota_grant",
            "grant_id": self.grant_id,
            "subscriber": self.subscriber,
            "agw_id": self.agw_id,
            "granted_bytes": self.granted_bytes,
            "issued_ms": self.issued_ms,
        }


@dataclass(frozen=True)
class Deny:
    subscriber: str
    reason: str

    def to_dict(self) -> dict:
        return {"type": "quota_deny", "subscriber": self.subscriber, "reason": self.reason}


@dataclass
class Account:
    subscriber: str
    balance_bytes: int
    outstanding_grants: dict[str, QuotaGrant] = field(default_factory=dict)
    debt_bytes: int = 0

    def settle(self) -> None:
        take = min(self.balance_bytes, self.debt_bytes)
        self.balance_bytes -= take
        self.debt_bytes -= take

    def in_flight(self) -> int:
        return sum(g.granted_bytes - g.reported_used for g in self.outstanding_grants.values())


class ChargingError(ValueError):
    pass


class Ocs:
    def __init__(self, quota_size: int = DEFAULT_QUOTA_SIZE, grant_timeout_ms: int = DEFAULT_GRANT_TIMEOUT_MS):
        if quota_size <= 0:
            raise ValueError("quota_size must be positive")
        self.quota_size = quota_size
        self.grant_timeout_ms = grant_timeout_ms
        self.accounts: dict[str, Account] = {}
        self.closed: dict[str, QuotaGrant] = {}
        self.reclaimed: set[str] = set()
        self.charged: dict[str, int] = {}
        self.alarms: list[str] = []
        self.warnings: list[str] = []
        self._next_grant = 1

    # accounts -----------------------------------------------------------

    def open_account(self, subscriber: str, balance_bytes: int) -> Account:
        if balance_bytes < 0:
            raise ChargingError("balance must be non-negative")
        acct = Account(subscriber, balance_bytes)
        self.accounts[subscriber] = acct
        self.charged.setdefault(subscriber, 0)
        return acct

    def balance(self, subscriber: str) -> int:
        return self.accounts[subscriber].balance_bytes

    def load_accounts(self, path) -> None:
        with open(path, "rb") as fh:
            for row in json.load(fh):
                self.open_account(row["subscriber"], int(row["balance_bytes"]))

    def dump_accounts(self) -> list[dict]:
        return [
            {"subscriber": a.subscriber, "balance_bytes": a.balance_bytes}
            for a in sorted(self.accounts.values(), key=lambda a: a.subscriber)
        ]

    # grants -------------------------------------------------------------

    def request_quota(self, subscriber: str, agw_id: str, now_ms: int = 0) -> "QuotaGrant | Deny":
        acct = self.accounts.get(subscriber)
        if acct is None:
            return Deny(subscriber, "no_account")
        acct.settle()
        if acct.balance_bytes <= 0:
            return Deny(subscriber, "insufficient_balance")
        size = min(self.quota_size, acct.balance_bytes)
        acct.balance_bytes -= size
        grant = QuotaGrant(f"g{self._next_grant}", subscriber, agw_id, size, 0, now_ms, now_ms)
        self._next_grant += 1
        acct.outstanding_grants[grant.grant_id] = grant
        return grant

    def _find(self, grant_id: str) -> Optional[QuotaGrant]:
        for acct in self.accounts.values():
            g = acct.outstanding_grants.get(grant_id)
            if g is not None:
                return g
        return None

    def report_usage(self, grant_id: str, used_bytes: int, final: bool = False, now_ms: int = 0) -> bool:
        """Record cumulative usage on a grant; a final report closes it.

        Returns True if the report changed anything.
        """
        grant = self._find(grant_id)
        if grant is None:
            if grant_id in self.reclaimed:
                self._late_charge(self.closed[grant_id], used_bytes)
            elif grant_id not in self.closed:
                self.warnings.append(f"usage report for unknown grant {grant_id}")
                log.warning("usage report for unknown grant %s", grant_id)
            return False
        if used_bytes > grant.granted_bytes:
            self.alarms.append(f"grant {grant_id} over-reported {used_bytes} > {grant.granted_bytes}")
            used_bytes = grant.granted_bytes
        grant.reported_used = max(grant.reported_used, used_bytes)
        grant.last_contact_ms = now_ms
        if final:
            self._close(grant)
        return True

    def _close(self, grant: QuotaGrant) -> None:
        acct = self.accounts[grant.subscriber]
        del acct.outstanding_grants[grant.grant_id]
        acct.balance_bytes += grant.granted_bytes - grant.reported_used
        acct.settle()
        self.charged[grant.subscriber] = self.charged.get(grant.subscriber, 0) + grant.reported_used
        self.closed[grant.grant_id] = grant

    def _late_charge(self, grant: QuotaGrant, used_bytes: int) -> None:
        # usage that arrives after a timeout refund becomes debt
        used_bytes = min(used_bytes, grant.granted_bytes)
        extra = used_bytes - grant.reported_used
        if extra <= 0:
            return
        grant.reported_used = used_bytes
        acct = self.accounts[grant.subscriber]
        acct.debt_bytes += extra
        self.charged[grant.subscriber] += extra
        acct.settle()

    def reclaim_stale(self, now_ms: int) -> list[str]:
        """Close grants with no contact for longer than the timeout."""
        stale = [
            g
            for acct in self.accounts.values()
            for g in acct.outstanding_grants.values()
            if now_ms - g.last_contact_ms > self.grant_timeout_ms
        ]
        for g in sorted(stale, key=lambda g: g.grant_id):
            self._close(g)
            self.reclaimed.add(g.grant_id)
        return [g.grant_id for g in stale]

    def conservation_gap(self, subscriber: str, initial_balance: int) -> int:
        """initial - (balance - debt + charged + outstanding granted); zero when books balance."""
        acct = self.accounts[subscriber]
        out = sum(g.granted_bytes for g in acct.outstanding_grants.values())
        return initial_balance - (acct.balance_bytes - acct.debt_bytes + self.charged[subscriber] + out)

    def outstanding(self, subscriber: str) -> list[QuotaGrant]:
        return list(self.accounts[subscriber].outstanding_grants.values())

    def handle(self, message: dict, now_ms: int) -> Optional[dict]:
        """Message entry point used by the simulator."""
        kind = message["type"]
        if kind == "quota_request":
            res = self.request_quota(message["subscriber"], message["agw_id"], now_ms)
            reply = res.to_dict()
            reply["session_id"] = message.get("session_id")
            reply["request_sent_ms"] = message.get("sent_ms", now_ms)
            return reply
        if kind == "usage_report":
            self.report_usage(message["grant_id"], message["used_bytes"], message.get("final", False), now_ms)
            return {
                "type": "usage_ack",
                "grant_id": message["grant_id"],
                "sent_ms": message.get("sent_ms", now_ms),
                "final": message.get("final", False),
            }
        raise ChargingError(f"unknown charging message {kind!r}")


@dataclass
class HeldGrant:
    grant_id: str
    granted: int
    used: int = 0
    valid_until_ms: int = 0
    closed: bool = False

    @property
    def remaining(self) -> int:
        return self.granted - self.used


class GrantWallet:
    """An AGW's grants for one session."""

    def __init__(self, quota_size: int = DEFAULT_QUOTA_SIZE, validity_ms: int = DEFAULT_GRANT_TIMEOUT_MS):
        self.quota_size = quota_size
        self.validity_ms = validity_ms
        self.grants: list[HeldGrant] = []
        self.total_used = 0
        self.request_pending_since: Optional[int] = None

    def add(self, grant_id: str, granted: int, sent_ms: int) -> None:
        self.grants.append(HeldGrant(grant_id, granted, 0, sent_ms + self.validity_ms))
        self.request_pending_since = None

    def renew(self, grant_id: str, sent_ms: int) -> None:
        for g in self.grants:
            if g.grant_id == grant_id and not g.closed:
                g.valid_until_ms = max(g.valid_until_ms, sent_ms + self.validity_ms)

    def live(self, now_ms: int) -> list[HeldGrant]:
        return [g for g in self.grants if not g.closed and now_ms < g.valid_until_ms]

    def authorized(self, now_ms: int) -> int:
        """Total bytes this session may have charged so far."""
        return sum(g.granted if (not g.closed and now_ms < g.valid_until_ms) else g.used for g in self.grants)

    def remaining(self, now_ms: int) -> int:
        return sum(g.remaining for g in self.live(now_ms))

    def charge_to(self, total_used: int, now_ms: int) -> int:
        """Attribute usage up to ``total_used`` to live grants, FIFO.

        Returns the bytes that could not be attributed (must be zero when the
        data plane honours :meth:`authorized`).
        """
        delta = total_used - self.total_used
        if delta <= 0:
            return 0
        for g in self.live(now_ms):
            take = min(delta, g.remaining)
            g.used += take
            delta -= take
            if not delta:
                break
        self.total_used = total_used - delta
        return delta

    def needs_refill(self, now_ms: int, pending_timeout_ms: int = 5_000) -> bool:
        if self.request_pending_since is not None and now_ms - self.request_pending_since < pending_timeout_ms:
            return False
        return self.remaining(now_ms) < REFILL_FRACTION * self.quota_size

    def to_close(self, now_ms: int) -> list[HeldGrant]:
        """Open grants that are used up or whose validity lapsed."""
        return [g for g in self.grants if not g.closed and (g.remaining == 0 or now_ms >= g.valid_until_ms)]

    def open_grants(self) -> list[HeldGrant]:
        return [g for g in self.grants if not g.closed]

    def to_dict(self) -> dict:
        return {
            "total_used": self.total_used,
            "grants": [
                {"grant_id": g.grant_id, "granted": g.granted, "used": g.used,
                 "valid_until_ms": g.valid_until_ms, "closed": g.closed}
                for g in self.grants
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, quota_size: int, validity_ms: int) -> "GrantWallet":
        w = cls(quota_size, validity_ms)
        w.total_used = d["total_used"]
        w.grants = [HeldGrant(**g) for g in d["grants"]]
        return w
