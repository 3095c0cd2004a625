"""Technology-specific edge adapters.

Radio-flavoured messages are parsed and built only here.  Everything past
an adapter sees the generic access messages defined below; nothing in them
depends on the access technology beyond the ``technology`` tag.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

from .model import AccessTechnology

LTE_DEFAULT_MAX_ACTIVE = 96
LTE_DEFAULT_MAX_THROUGHPUT_BPS = 126_000_000
WIFI_DEFAULT_MAX_ACTIVE = 64
WIFI_DEFAULT_MAX_THROUGHPUT_BPS = 100_000_000

UNKNOWN_ELEMENT = "ran.unknown_element"


# --- generic (RAN-agnostic) messages ---------------------------------------


@dataclass(frozen=True)
class GenericAccessRequest:
    subscriber: str
    technology: AccessTechnology
    ran_element_id: str

    def __post_init__(self):
        object.__setattr__(self, "technology", AccessTechnology(self.technology))


@dataclass(frozen=True)
class GenericChallenge:
    subscriber: str
    nonce: bytes
    ran_element_id: str = ""


@dataclass(frozen=True)
class ChallengeResponse:
    subscriber: str
    mac: bytes
    ran_element_id: str = ""


@dataclass(frozen=True)
class AttachAccept:
    subscriber: str
    session_id: str
    ue_ip: str
    tunnel_id: int
    session_key: bytes
    technology: AccessTechnology = AccessTechnology.LTE_LIKE
    ran_element_id: str = ""


@dataclass(frozen=True)
class Reject:
    subscriber: str
    reason: str
    ran_element_id: str = ""


GenericReply = Union[GenericChallenge, AttachAccept, Reject]


@dataclass(frozen=True)
class RanElement:
    ran_element_id: str
    technology: AccessTechnology
    agw_id: str
    max_active: Optional[int] = None
    max_throughput_bps: Optional[int] = None

    def __post_init__(self):
        tech = AccessTechnology(self.technology)
        object.__setattr__(self, "technology", tech)
        lte = tech is AccessTechnology.LTE_LIKE
        if self.max_active is None:
            object.__setattr__(self, "max_active", LTE_DEFAULT_MAX_ACTIVE if lte else WIFI_DEFAULT_MAX_ACTIVE)
        if self.max_throughput_bps is None:
            object.__setattr__(
                self,
                "max_throughput_bps",
                LTE_DEFAULT_MAX_THROUGHPUT_BPS if lte else WIFI_DEFAULT_MAX_THROUGHPUT_BPS,
            )

    def to_dict(self) -> dict:
        return {
            "ran_element_id": self.ran_element_id,
            "technology": self.technology.value,
            "agw_id": self.agw_id,
            "max_active": self.max_active,
            "max_throughput_bps": self.max_throughput_bps,
        }

    @classmethod
    def from_dict(cls, d) -> "RanElement":
        return cls(
            d["ran_element_id"], d["technology"], d["agw_id"], d.get("max_active"), d.get("max_throughput_bps")
        )


# --- LTE-flavoured messages (NAS-over-S1 stand-ins) ----------------------


@dataclass(frozen=True)
class LteAttachMsg:
    imsi: str
    enb_id: str
    establishment_cause: str = "mo_data"


@dataclass(frozen=True)
class LteAuthResponse:
    imsi: str
    enb_id: str
    res: bytes


@dataclass(frozen=True)
class LteAuthRequest:
    imsi: str
    enb_id: str
    rand: bytes


@dataclass(frozen=True)
class LteAttachAccept:
    imsi: str
    enb_id: str
    ue_ip: str
    teid: int
    kenb: bytes


@dataclass(frozen=True)
class LteAttachReject:
    imsi: str
    enb_id: str
    emm_cause: str


# --- WiFi-flavoured messages (RADIUS stand-ins) --------------------------


@dataclass(frozen=True)
class WifiAccessRequest:
    username: str
    ap_id: str
    response: Optional[bytes] = None


@dataclass(frozen=True)
class WifiAccessChallenge:
    username: str
    ap_id: str
    state: bytes


@dataclass(frozen=True)
class WifiAccessAccept:
    username: str
    ap_id: str
    framed_ip: str
    session_key: bytes


@dataclass(frozen=True)
class WifiAccessReject:
    username: str
    ap_id: str
    reply_message: str


_LTE_CAUSES = {
    "unknown": "imsi_unknown_in_hss",
    "forbidden": "eps_services_not_allowed",
    "congested": "congestion",
    "auth": "authentication_failure",
    "timeout": "protocol_error",
}


def _check_reply(reply) -> None:
    if not isinstance(reply, (GenericChallenge, AttachAccept, Reject)):
        raise TypeError(f"not a generic reply: {type(reply).__name__}")


class _Adapter:
    technology: AccessTechnology

    def __init__(self, elements=()):
        self.elements: set[str] = set(elements)
        self.counters: Counter = Counter()

    def register(self, element_id: str) -> None:
        self.elements.add(element_id)

    def _known(self, element_id: str) -> bool:
        if element_id in self.elements:
            return True
        self.counters[UNKNOWN_ELEMENT] += 1
        return False


class LteAdapter(_Adapter):
    technology = AccessTechnology.LTE_LIKE

    def lte_translate_in(
        self, msg: "LteAttachMsg | LteAuthResponse"
    ) -> "GenericAccessRequest | ChallengeResponse | None":
        """Map an eNB-originated message to its generic form; None means dropped."""
        if not isinstance(msg, (LteAttachMsg, LteAuthResponse)):
            raise TypeError(f"not an LTE uplink message: {type(msg).__name__}")
        if not self._known(msg.enb_id):
            return None
        if isinstance(msg, LteAttachMsg):
            return GenericAccessRequest(msg.imsi, self.technology, msg.enb_id)
        return ChallengeResponse(msg.imsi, msg.res, msg.enb_id)

    def lte_translate_out(self, reply: GenericReply):
        _check_reply(reply)
        enb = reply.ran_element_id
        if isinstance(reply, GenericChallenge):
            return LteAuthRequest(reply.subscriber, enb, reply.nonce)
        if isinstance(reply, AttachAccept):
            return LteAttachAccept(reply.subscriber, enb, reply.ue_ip, reply.tunnel_id, reply.session_key)
        if isinstance(reply, Reject):
            return LteAttachReject(reply.subscriber, enb, _LTE_CAUSES.get(reply.reason, reply.reason))
        raise TypeError(f"not a generic reply: {type(reply).__name__}")

    translate_in = lte_translate_in
    translate_out = lte_translate_out


class WifiAdapter(_Adapter):
    technology = AccessTechnology.WIFI_LIKE

    def wifi_translate_in(self, msg: WifiAccessRequest) -> "GenericAccessRequest | ChallengeResponse | None":
        if not self._known(msg.ap_id):
            return None
        if msg.response is None:
            return GenericAccessRequest(msg.username, self.technology, msg.ap_id)
        return ChallengeResponse(msg.username, msg.response, msg.ap_id)

    def wifi_translate_out(self, reply: GenericReply):
        _check_reply(reply)
        ap = reply.ran_element_id
        if isinstance(reply, GenericChallenge):
            return WifiAccessChallenge(reply.subscriber, ap, reply.nonce)
        if isinstance(reply, AttachAccept):
            # plain forwarding on WiFi: the tunnel id stays inside the AGW
            return WifiAccessAccept(reply.subscriber, ap, reply.ue_ip, reply.session_key)
        if isinstance(reply, Reject):
            return WifiAccessReject(reply.subscriber, ap, reply.reason)
        raise TypeError(f"not a generic reply: {type(reply).__name__}")

    translate_in = wifi_translate_in
    translate_out = wifi_translate_out


def adapter_for(technology: AccessTechnology) -> _Adapter:
    technology = AccessTechnology(technology)
    if technology is AccessTechnology.LTE_LIKE:
        return LteAdapter()
    return WifiAdapter()


class UeRadio:
    """Builds technology-flavoured uplink messages on behalf of a simulated UE."""

    def __init__(self, subscriber: str, technology: AccessTechnology, element_id: str):
        self.subscriber = subscriber
        self.technology = AccessTechnology(technology)
        self.element_id = element_id

    def attach_msg(self):
        if self.technology is AccessTechnology.LTE_LIKE:
            return LteAttachMsg(self.subscriber, self.element_id)
        return WifiAccessRequest(self.subscriber, self.element_id)

    def challenge_nonce(self, msg) -> Optional[bytes]:
        if isinstance(msg, LteAuthRequest):
            return msg.rand
        if isinstance(msg, WifiAccessChallenge):
            return msg.state
        return None

    def response_msg(self, mac: bytes):
        if self.technology is AccessTechnology.LTE_LIKE:
            return LteAuthResponse(self.subscriber, self.element_id, mac)
        return WifiAccessRequest(self.subscriber, self.element_id, mac)

    @staticmethod
    def outcome(msg) -> tuple[str, Optional[str], Optional[int]]:
        """(``accept``|``reject``|``other``, ue_ip or reason, tunnel id)."""
        if isinstance(msg, LteAttachAccept):
            return "accept", msg.ue_ip, msg.teid
        if isinstance(msg, WifiAccessAccept):
            return "accept", msg.framed_ip, None
        if isinstance(msg, LteAttachReject):
            return "reject", msg.emm_cause, None
        if isinstance(msg, WifiAccessReject):
            return "reject", msg.reply_message, None
        return "other", None, None
