"""Scenario files: structural schema, semantic checks and normalization.

A scenario is plain JSON.  ``load_scenario`` returns a :class:`Scenario`
whose ``population`` is fully expanded (one entry per UE) and whose
subscriber list includes any profiles provisioned by population groups.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import jsonschema

from ..model import (
    AccessTechnology,
    Policy,
    SubscriberProfile,
    validate_network_config,
)

DEFAULT_CHANNELS = {
    "backhaul": {"loss": 0.01, "latency_ms": [20, 200]},
    "ocs": {"loss": 0.01, "latency_ms": [20, 200]},
    "feg": {"loss": 0.0, "latency_ms": [5, 20]},
    "ran": {"loss": 0.0, "latency_ms": 1},
}
CHANNEL_CLASSES = tuple(DEFAULT_CHANNELS)

_num = {"type": "number", "minimum": 0}
_int = {"type": "integer", "minimum": 0}
_latency = {
    "oneOf": [_num, {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}],
}
_channel = {
    "type": "object",
    "properties": {"loss": {"type": "number", "minimum": 0, "maximum": 1}, "latency_ms": _latency},
    "additionalProperties": False,
}
_traffic = {
    "type": "object",
    "properties": {
        "rate_bps": _num,
        "duration_ms": _num,
        "packet_size": {"type": "integer", "minimum": 1},
        "direction": {"enum": ["downlink", "uplink"]},
        "start_delay_ms": _num,
    },
    "additionalProperties": False,
}
_ue_common = {
    "traffic": _traffic,
    "retry_interval_ms": _num,
    "max_attempts": {"type": "integer", "minimum": 1},
    "detach": {"type": "boolean"},
    "technology": {"enum": [t.value for t in AccessTechnology]},
}

SCHEMA: dict = {
    "type": "object",
    "required": ["network", "duration_ms"],
    "properties": {
        "seed": {},
        "duration_ms": _num,
        "network": {
            "type": "object",
            "required": ["agws", "ran_elements"],
            "properties": {
                "agws": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["agw_id"],
                        "properties": {
                            "agw_id": {"type": "string", "minLength": 1},
                            "ip_pool": {"type": "string"},
                            "attach_cost_ms": _num,
                            "queue_limit": _int,
                            "max_sessions": _int,
                            "user_plane_bps": _num,
                            "checkpoint_interval_ms": {"type": "number", "exclusiveMinimum": 0},
                            "cups": {
                                "type": "object",
                                "required": ["total_cores", "user_cores", "attach_rate_per_core", "bps_per_core"],
                                "properties": {
                                    "total_cores": {"type": "integer", "minimum": 1},
                                    "user_cores": {"oneOf": [_int, {"const": "flexible"}]},
                                    "attach_rate_per_core": {"type": "number", "exclusiveMinimum": 0},
                                    "bps_per_core": _num,
                                    "epoch_ms": {"type": "number", "exclusiveMinimum": 0},
                                },
                                "additionalProperties": False,
                            },
                        },
                        "additionalProperties": False,
                    },
                },
                "ran_elements": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["ran_element_id", "technology", "agw_id"],
                        "properties": {
                            "ran_element_id": {"type": "string", "minLength": 1},
                            "technology": {"enum": [t.value for t in AccessTechnology]},
                            "agw_id": {"type": "string"},
                            "max_active": _int,
                            "max_throughput_bps": _num,
                        },
                        "additionalProperties": False,
                    },
                },
                "channels": {"type": "object", "additionalProperties": _channel},
                "federation_mode": {"enum": ["standalone", "local_breakout"]},
            },
            "additionalProperties": False,
        },
        "policies": {"type": "array", "items": {"type": "object"}},
        "subscribers": {"type": "array", "items": {"type": "object"}},
        "population": {
            "type": "array",
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["subscriber", "ran_element_id", "attach_time_ms"],
                        "properties": dict(
                            _ue_common,
                            subscriber={"type": "string"},
                            ran_element_id={"type": "string"},
                            attach_time_ms=_num,
                            auth_key={"type": "string"},
                        ),
                        "additionalProperties": False,
                    },
                    {
                        "type": "object",
                        "required": ["count", "id_start", "ran_elements", "rate_per_s"],
                        "properties": dict(
                            _ue_common,
                            count=_int,
                            id_start={"type": "string", "pattern": "^[0-9]{6,15}$"},
                            ran_elements={"type": "array", "items": {"type": "string"}, "minItems": 1},
                            start_ms=_num,
                            rate_per_s={"type": "number", "exclusiveMinimum": 0},
                            provision={
                                "type": "object",
                                "properties": {
                                    "policy_id": {"type": "string"},
                                    "charging_mode": {"enum": ["unlimited", "quota"]},
                                    "allowed_technologies": {"type": "array", "items": {"type": "string"}},
                                    "balance_bytes": _int,
                                },
                                "required": ["policy_id"],
                                "additionalProperties": False,
                            },
                        ),
                        "additionalProperties": False,
                    },
                ]
            },
        },
        "mutations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["t_ms", "op"],
                "properties": {
                    "t_ms": _num,
                    "op": {"enum": ["add_subscriber", "remove_subscriber", "upsert_policy"]},
                    "subscriber": {},
                    "policy": {"type": "object"},
                },
                "additionalProperties": False,
            },
        },
        "faults": {
            "type": "array",
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["kind", "agw", "t_ms", "restore_ms"],
                        "properties": {
                            "kind": {"const": "agw_crash"},
                            "agw": {"type": "string"},
                            "t_ms": _num,
                            "restore_ms": _num,
                            "with_checkpoint": {"type": "boolean"},
                        },
                        "additionalProperties": False,
                    },
                    {
                        "type": "object",
                        "required": ["kind", "channel", "t0_ms", "t1_ms"],
                        "properties": {
                            "kind": {"const": "partition"},
                            "channel": {"type": "string"},
                            "t0_ms": _num,
                            "t1_ms": _num,
                        },
                        "additionalProperties": False,
                    },
                    {
                        "type": "object",
                        "required": ["kind", "t0_ms", "t1_ms"],
                        "properties": {"kind": {"const": "orchestrator_down"}, "t0_ms": _num, "t1_ms": _num},
                        "additionalProperties": False,
                    },
                ]
            },
        },
        "charging": {
            "type": "object",
            "properties": {
                "quota_size": {"type": "integer", "minimum": 1},
                "grant_timeout_ms": _num,
                "accounts": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["subscriber", "balance_bytes"],
                        "properties": {"subscriber": {"type": "string"}, "balance_bytes": _int},
                    },
                },
            },
            "additionalProperties": False,
        },
        "federation": {
            "type": "object",
            "properties": {
                "external_core": {"type": "array", "items": {"type": "object"}},
                "latency_ms": _num,
                "down_windows": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
                "ttl_ms": _num,
                "timeout_ms": _num,
            },
            "additionalProperties": False,
        },
        "options": {
            "type": "object",
            "properties": {
                "trace_packets": {"type": "boolean"},
                "attach_timeout_ms": _num,
                "debug": {"type": "boolean"},
                "flow_stats_interval_ms": {"type": "number", "exclusiveMinimum": 0},
                "nonce_timeout_ms": _num,
                "resend_interval_ms": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def provisioned_key(subscriber: str) -> bytes:
    """Deterministic 16-byte key for subscribers created by population groups."""
    return hashlib.blake2b(subscriber.encode(), digest_size=16, person=b"accessnet-key").digest()


@dataclass
class Scenario:
    raw: dict
    seed: Any
    duration_ms: float
    agws: list[dict]
    ran_elements: list[dict]
    channels: dict[str, dict]
    federation_mode: str
    policies: list[Policy]
    subscribers: list[SubscriberProfile]
    population: list[dict]
    mutations: list[dict]
    faults: list[dict]
    charging: dict
    federation: dict
    options: dict = field(default_factory=dict)

    def channel_spec(self, name: str) -> dict:
        cls = name.split(":", 1)[0]
        spec = dict(DEFAULT_CHANNELS[cls])
        spec.update(self.channels.get(cls, {}))
        spec.update(self.channels.get(name, {}))
        return spec


def _expand_population(entries: list[dict]) -> tuple[list[dict], list[tuple[SubscriberProfile, dict]]]:
    ues: list[dict] = []
    provisioned = []
    for entry in entries:
        if "count" not in entry:
            ues.append(dict(entry))
            continue
        start = int(entry["id_start"])
        width = len(entry["id_start"])
        common = {k: entry[k] for k in _ue_common if k in entry}
        prov = entry.get("provision")
        for i in range(entry["count"]):
            sub = str(start + i).zfill(width)
            ue = dict(
                common,
                subscriber=sub,
                ran_element_id=entry["ran_elements"][i % len(entry["ran_elements"])],
                attach_time_ms=entry.get("start_ms", 0) + i * 1000.0 / entry["rate_per_s"],
            )
            ues.append(ue)
            if prov is not None:
                profile = SubscriberProfile(
                    sub,
                    provisioned_key(sub),
                    prov["policy_id"],
                    frozenset(prov.get("allowed_technologies", [t.value for t in AccessTechnology])),
                    prov.get("charging_mode", "unlimited"),
                )
                provisioned.append((profile, prov))
    return ues, provisioned


def validate_scenario(raw: dict) -> Scenario:
    """Reject malformed scenarios before anything runs."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    problems = [
        f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    ]
    if problems:
        raise ScenarioError(problems)

    raw = copy.deepcopy(raw)
    net = raw["network"]
    agw_ids = [a["agw_id"] for a in net["agws"]]
    ran_ids = [r["ran_element_id"] for r in net["ran_elements"]]
    if len(set(agw_ids)) != len(agw_ids):
        problems.append("network/agws: duplicate agw_id")
    if len(set(ran_ids)) != len(ran_ids):
        problems.append("network/ran_elements: duplicate ran_element_id")
    for r in net["ran_elements"]:
        if r["agw_id"] not in agw_ids:
            problems.append(f"ran element {r['ran_element_id']}: unknown agw {r['agw_id']}")
    for name in net.get("channels", {}):
        cls, _, target = name.partition(":")
        if cls not in CHANNEL_CLASSES:
            problems.append(f"network/channels/{name}: unknown channel class")
        elif target and target not in (agw_ids if cls != "ran" else ran_ids):
            problems.append(f"network/channels/{name}: unknown endpoint {target}")

    try:
        policies = [Policy.from_dict(p) for p in raw.get("policies", [])]
        subscribers = [SubscriberProfile.from_dict(s) for s in raw.get("subscribers", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError([f"config: {exc}"]) from exc

    population, provisioned = _expand_population(raw.get("population", []))
    known = {s.id for s in subscribers}
    accounts = list(raw.get("charging", {}).get("accounts", []))
    for profile, prov in provisioned:
        if profile.id in known:
            continue
        known.add(profile.id)
        subscribers.append(profile)
        if "balance_bytes" in prov:
            accounts.append({"subscriber": profile.id, "balance_bytes": prov["balance_bytes"]})
    report = validate_network_config(subscribers, policies)
    problems += [str(v) for v in report.violations]

    federated = {p.get("subscriber") for p in raw.get("federation", {}).get("external_core", [])}
    mutation_subs = {
        m["subscriber"]["id"] for m in raw.get("mutations", []) if m["op"] == "add_subscriber" and isinstance(m.get("subscriber"), dict)
    }
    seen_ues: set[str] = set()
    for i, ue in enumerate(population):
        if ue["subscriber"] in seen_ues:
            problems.append(f"population/{i}: subscriber {ue['subscriber']} appears twice")
        seen_ues.add(ue["subscriber"])
        if ue["ran_element_id"] not in ran_ids:
            problems.append(f"population/{i}: unknown ran element {ue['ran_element_id']}")
        sub = ue["subscriber"]
        if sub not in known and sub not in federated and sub not in mutation_subs and "auth_key" not in ue:
            problems.append(f"population/{i}: no key for subscriber {sub}")

    crash_windows: dict[str, list[tuple[float, float]]] = {}
    for i, f in enumerate(raw.get("faults", [])):
        kind = f["kind"]
        if kind == "agw_crash":
            if f["agw"] not in agw_ids:
                problems.append(f"faults/{i}: unknown agw {f['agw']}")
            if f["restore_ms"] <= f["t_ms"]:
                problems.append(f"faults/{i}: restore_ms must follow t_ms")
            for a, b in crash_windows.get(f["agw"], []):
                if f["t_ms"] < b and a < f["restore_ms"]:
                    problems.append(f"faults/{i}: overlapping crash windows on {f['agw']}")
            crash_windows.setdefault(f["agw"], []).append((f["t_ms"], f["restore_ms"]))
        else:
            if f["t1_ms"] <= f["t0_ms"]:
                problems.append(f"faults/{i}: empty window")
            if kind == "partition":
                cls, _, target = f["channel"].partition(":")
                if cls == "dataplane":
                    problems.append(f"faults/{i}: cannot partition {f['channel']}: co-located components")
                elif cls not in CHANNEL_CLASSES or not target:
                    problems.append(f"faults/{i}: unknown channel {f['channel']}")
                elif target not in (agw_ids if cls != "ran" else ran_ids):
                    problems.append(f"faults/{i}: unknown endpoint {target}")
    if problems:
        raise ScenarioError(problems)

    charging = dict(raw.get("charging", {}))
    charging["accounts"] = accounts
    return Scenario(
        raw=raw,
        seed=raw.get("seed", 0),
        duration_ms=float(raw["duration_ms"]),
        agws=net["agws"],
        ran_elements=net["ran_elements"],
        channels=net.get("channels", {}),
        federation_mode=net.get("federation_mode", "standalone"),
        policies=policies,
        subscribers=subscribers,
        population=population,
        mutations=sorted(raw.get("mutations", []), key=lambda m: m["t_ms"]),
        faults=raw.get("faults", []),
        charging=charging,
        federation=raw.get("federation", {}),
        options=raw.get("options", {}),
    )


def load_scenario(path_or_dict) -> Scenario:
    if isinstance(path_or_dict, dict):
        return validate_scenario(path_or_dict)
    with open(path_or_dict, "rb") as fh:
        return validate_scenario(json.load(fh))
