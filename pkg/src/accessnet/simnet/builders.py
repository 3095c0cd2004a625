"""Ready-made scenario dictionaries for the standard experiments."""

from __future__ import annotations

from typing import Any, Optional

from ..model import AccessTechnology

ALL_TECH = [t.value for t in AccessTechnology]


def _flat(policy_id: str, rate_bps: int) -> dict:
    return {"id": policy_id, "phases": [{"rate_limit_bps": rate_bps}]}


def _ran(ran_id: str, agw: str, max_active: int = 96, cap_bps: float = 126e6, tech: str = "lte_like") -> dict:
    return {
        "ran_element_id": ran_id,
        "technology": tech,
        "agw_id": agw,
        "max_active": max_active,
        "max_throughput_bps": cap_bps,
    }


def base(duration_ms: float, seed: Any = 0, **extra) -> dict:
    sc = {
        "seed": seed,
        "duration_ms": duration_ms,
        "network": {"agws": [], "ran_elements": []},
        "policies": [_flat("basic", 0)],
        "population": [],
    }
    sc.update(extra)
    return sc


def reference_workload(
    ues: int = 288,
    rate_per_s: float = 3.0,
    ue_bps: float = 1.5e6,
    ran_elements: int = 3,
    ran_cap_bps: float = 126e6,
    traffic_ms: float = 150_000,
    packet_size: int = 25_000,
    seed: Any = 0,
) -> dict:
    """One AGW, several RAN elements, UEs arriving at a constant rate and downloading."""
    sc = base(traffic_ms + ues / rate_per_s * 1000 + 10_000, seed)
    sc["network"]["agws"] = [{"agw_id": "agw1"}]
    sc["network"]["ran_elements"] = [_ran(f"enb{i + 1}", "agw1", 96, ran_cap_bps) for i in range(ran_elements)]
    sc["population"] = [
        {
            "count": ues,
            "id_start": "001010000000001",
            "ran_elements": [f"enb{i + 1}" for i in range(ran_elements)],
            "start_ms": 3000,
            "rate_per_s": rate_per_s,
            "traffic": {"rate_bps": ue_bps, "duration_ms": traffic_ms, "packet_size": packet_size},
            "provision": {"policy_id": "basic"},
        }
    ]
    return sc


def overload(
    offered_per_s: float,
    capacity_per_s: float = 2.0,
    arrivals_ms: float = 300_000,
    queue_limit: int = 64,
    seed: Any = 0,
) -> dict:
    """Attach storm without user traffic; sessions detach right after attaching."""
    count = int(offered_per_s * arrivals_ms / 1000)
    sc = base(arrivals_ms + 80_000, seed)
    sc["network"]["agws"] = [{"agw_id": "agw1", "attach_cost_ms": 1000.0 / capacity_per_s, "queue_limit": queue_limit}]
    sc["network"]["ran_elements"] = [_ran("enb1", "agw1", 100_000, 10e9)]
    sc["population"] = [
        {
            "count": count,
            "id_start": "001010000000001",
            "ran_elements": ["enb1"],
            "start_ms": 3000,
            "rate_per_s": offered_per_s,
            "provision": {"policy_id": "basic"},
        }
    ]
    return sc


def cups(
    user_cores,
    total_cores: int = 4,
    attach_rate_per_core: float = 1.0,
    bps_per_core: float = 20e6,
    offered_per_s: float = 3.0,
    ues: int = 180,
    ue_bps: float = 2e6,
    traffic_ms: float = 120_000,
    seed: Any = 0,
) -> dict:
    """Fixed or flexible division of AGW cores between control and user plane."""
    storm_ms = ues / offered_per_s * 1000
    sc = base(storm_ms + traffic_ms + 5_000, seed)
    sc["network"]["agws"] = [
        {
            "agw_id": "agw1",
            "cups": {
                "total_cores": total_cores,
                "user_cores": user_cores,
                "attach_rate_per_core": attach_rate_per_core,
                "bps_per_core": bps_per_core,
            },
        }
    ]
    sc["network"]["ran_elements"] = [_ran("enb1", "agw1", 100_000, 10e9)]
    sc["population"] = [
        {
            "count": ues,
            "id_start": "001010000000001",
            "ran_elements": ["enb1"],
            "start_ms": 3000,
            "rate_per_s": offered_per_s,
            "traffic": {"rate_bps": ue_bps, "duration_ms": traffic_ms + storm_ms, "packet_size": 25_000},
            "provision": {"policy_id": "basic"},
        }
    ]
    return sc


def rate_limit(
    x_bps: int = 10_000_000,
    y_bytes: int = 1_000_000,
    z_bps: int = 2_000_000,
    load_factor: float = 2.0,
    traffic_ms: float = 12_000,
    packet_size: int = 1250,
    seed: Any = 0,
) -> dict:
    """A single UE with an "X until Y bytes, then Z" policy, offered more than X."""
    sc = base(traffic_ms + 3_000, seed, options={"trace_packets": True})
    sc["policies"] = [
        {"id": "tiered", "phases": [{"rate_limit_bps": x_bps, "byte_threshold": y_bytes}, {"rate_limit_bps": z_bps}]}
    ]
    sc["network"]["agws"] = [{"agw_id": "agw1"}]
    sc["network"]["ran_elements"] = [_ran("enb1", "agw1")]
    sc["population"] = [
        {
            "count": 1,
            "id_start": "001010000000001",
            "ran_elements": ["enb1"],
            "start_ms": 3000,
            "rate_per_s": 1,
            "traffic": {"rate_bps": x_bps * load_factor, "duration_ms": traffic_ms, "packet_size": packet_size},
            "provision": {"policy_id": "tiered"},
        }
    ]
    return sc


def headless(
    cached: int = 100,
    outage: tuple[float, float] = (10_000, 60_000),
    storm_rate_per_s: float = 5.0,
    new_subscriber: Optional[str] = "001019999999999",
    seed: Any = 0,
) -> dict:
    """Orchestrator outage across an attach storm, plus one subscriber added mid-outage."""
    t0, t1 = outage
    sc = base(t1 + 30_000, seed)
    sc["network"]["agws"] = [{"agw_id": "agw1"}]
    sc["network"]["ran_elements"] = [_ran("enb1", "agw1", 1000, 1e9)]
    sc["faults"] = [{"kind": "orchestrator_down", "t0_ms": t0, "t1_ms": t1}]
    sc["population"] = [
        {
            "count": cached,
            "id_start": "001010000000001",
            "ran_elements": ["enb1"],
            "start_ms": t0 + 2_000,
            "rate_per_s": storm_rate_per_s,
            "traffic": {"rate_bps": 1e6, "duration_ms": 5_000, "packet_size": 12_500},
            "provision": {"policy_id": "basic"},
        }
    ]
    if new_subscriber is not None:
        key = "5a" * 16
        sc["mutations"] = [
            {
                "t_ms": t0 + 1_000,
                "op": "add_subscriber",
                "subscriber": {"id": new_subscriber, "auth_key": key, "policy_id": "basic",
                               "allowed_technologies": ALL_TECH, "charging_mode": "unlimited"},
            }
        ]
        sc["population"].append(
            {
                "subscriber": new_subscriber,
                "ran_element_id": "enb1",
                "attach_time_ms": t0 + 3_000,
                "retry_interval_ms": 500,
                "max_attempts": 1000,
                "traffic": {"rate_bps": 1e6, "duration_ms": 2_000, "packet_size": 12_500},
            }
        )
    return sc


def multi_agw(
    agws: int = 3,
    ues_per_agw: int = 20,
    crash: Optional[dict] = None,
    duration_ms: float = 90_000,
    quota: bool = True,
    seed: Any = 0,
) -> dict:
    """Several AGWs with quota-charged subscribers; optionally one crash fault."""
    sc = base(duration_ms, seed)
    sc["policies"] = [{"id": "tiered", "phases": [{"rate_limit_bps": 4_000_000, "byte_threshold": 2_000_000},
                                                  {"rate_limit_bps": 1_000_000}]}]
    sc["network"]["agws"] = [{"agw_id": f"agw{i + 1}"} for i in range(agws)]
    sc["network"]["ran_elements"] = [_ran(f"enb{i + 1}", f"agw{i + 1}") for i in range(agws)]
    prov = {"policy_id": "tiered"}
    if quota:
        prov.update(charging_mode="quota", balance_bytes=50_000_000)
    sc["population"] = [
        {
            "count": ues_per_agw,
            "id_start": f"00101{i + 1}000000001",
            "ran_elements": [f"enb{i + 1}"],
            "start_ms": 2_000,
            "rate_per_s": 2,
            "traffic": {"rate_bps": 3e6, "duration_ms": duration_ms - 20_000, "packet_size": 12_500},
            "provision": dict(prov),
        }
        for i in range(agws)
    ]
    sc["faults"] = [crash] if crash else []
    return sc


def federated(
    federated_subs: int = 5,
    core_down: Optional[tuple[float, float]] = None,
    attach_times: Optional[list[float]] = None,
    seed: Any = 0,
) -> dict:
    """Local breakout: the AGW fetches policy for visiting subscribers through the FeG."""
    sc = base(60_000, seed, options={"trace_packets": True})
    sc["network"]["agws"] = [{"agw_id": "agw1"}]
    sc["network"]["ran_elements"] = [_ran("enb1", "agw1")]
    sc["network"]["federation_mode"] = "local_breakout"
    directory = []
    times = attach_times or [2_000 + 1_000 * i for i in range(federated_subs)]
    for i in range(federated_subs):
        sub = f"99999000000{i + 1:04d}"
        directory.append(
            {"subscriber": sub, "auth_key": f"{i + 1:02x}" * 16,
             "policy": {"id": f"roam-{sub}", "phases": [{"rate_limit_bps": 5_000_000}]}}
        )
        sc["population"].append(
            {
                "subscriber": sub,
                "ran_element_id": "enb1",
                "attach_time_ms": times[i % len(times)],
                "traffic": {"rate_bps": 8e6, "duration_ms": 3_000, "packet_size": 1250},
            }
        )
    sc["federation"] = {"external_core": directory, "latency_ms": 50}
    if core_down is not None:
        sc["federation"]["down_windows"] = [list(core_down)]
    return sc
