"""Pure functions from a run report to measured series."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Optional

import numpy as np

CSR_BIN_MS = 5_000

METRICS = ("csr", "throughput", "delivered_bytes", "cp_utilization", "attach_phase_ms", "drops")


def _trace(report) -> list[dict]:
    return report.trace if hasattr(report, "trace") else report


def csr_bins(report, bin_ms: int = CSR_BIN_MS, subscribers: Optional[Iterable[str]] = None) -> list[dict]:
    """Successful over attempted attaches, binned by attempt time."""
    subs = None if subscribers is None else set(subscribers)
    attempts: dict[tuple, int] = {}
    ok: set = set()
    for r in _trace(report):
        if subs is not None and r.get("subscriber") not in subs:
            continue
        if r["ev"] == "attach_attempt":
            attempts[(r["ue"], r["attempt"])] = int(r["t"] // bin_ms)
        elif r["ev"] == "attach_result" and r["ok"]:
            ok.add((r["ue"], r["attempt"]))
    total: dict[int, int] = defaultdict(int)
    good: dict[int, int] = defaultdict(int)
    for key, b in attempts.items():
        total[b] += 1
        good[b] += key in ok
    return [
        {"bin_start_ms": b * bin_ms, "attempts": total[b], "successes": good[b], "csr": good[b] / total[b]}
        for b in sorted(total)
    ]


def mean_csr(bins: list[dict], from_ms: float = 0, to_ms: float = float("inf")) -> float:
    """Attempt-weighted CSR over bins starting inside [from_ms, to_ms)."""
    sel = [b for b in bins if from_ms <= b["bin_start_ms"] < to_ms]
    attempts = sum(b["attempts"] for b in sel)
    if attempts == 0:
        raise ValueError("no attach attempts in window")
    return sum(b["successes"] for b in sel) / attempts


def throughput_series(report, agw: Optional[str] = None) -> list[dict]:
    """Delivered bits per second, per metrics interval, summed over AGWs."""
    per_t: dict[float, float] = defaultdict(float)
    prev_t: dict[str, float] = {}
    for m in report.metrics:
        if m["name"] != "delivered_bytes" or (agw is not None and m["source"] != agw):
            continue
        span = m["time_ms"] - prev_t.get(m["source"], 0.0)
        prev_t[m["source"]] = m["time_ms"]
        if span > 0:
            per_t[m["time_ms"]] += m["value"] * 8000.0 / span
    return [{"time_ms": t, "bps": v} for t, v in sorted(per_t.items())]


def mean_throughput(report, from_ms: float, to_ms: float, agw: Optional[str] = None) -> float:
    vals = [p["bps"] for p in throughput_series(report, agw) if from_ms < p["time_ms"] <= to_ms]
    if not vals:
        raise ValueError("no throughput samples in window")
    return float(np.mean(vals))


def delivered_by_subscriber(report) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in _trace(report):
        if r["ev"] == "flow_stats":
            out[r["subscriber"]] = r["delivered_bytes"]
    return dict(sorted(out.items()))


def drops_total(report) -> dict[str, int]:
    last: dict[int, dict] = {}
    for r in _trace(report):
        if r["ev"] == "flow_stats":
            last[r["ue"]] = r["drops"]
    out: dict[str, int] = defaultdict(int)
    for d in last.values():
        for k, v in d.items():
            out[k] += v
    return dict(sorted(out.items()))


def cp_utilization(report, agw: Optional[str] = None, from_ms: float = 0, to_ms: float = float("inf")) -> float:
    """Busy fraction of the control-plane server(s) over the window."""
    busy = []
    spans = []
    prev: dict[str, float] = {}
    for m in report.metrics:
        if m["name"] != "cp_busy_ms" or (agw is not None and m["source"] != agw):
            continue
        start = prev.get(m["source"], 0.0)
        prev[m["source"]] = m["time_ms"]
        if from_ms <= start and m["time_ms"] <= to_ms:
            busy.append(m["value"])
            spans.append(m["time_ms"] - start)
    if not spans:
        raise ValueError("no utilization samples in window")
    return float(np.sum(busy) / np.sum(spans))


def attach_phase_ms(report) -> Optional[float]:
    """From the first attach attempt to the last successful attach."""
    tr = _trace(report)
    first = next((r["t"] for r in tr if r["ev"] == "attach_attempt"), None)
    last = None
    for r in tr:
        if r["ev"] == "attach_result" and r["ok"]:
            last = r["t"]
    if first is None or last is None:
        return None
    return last - first


def measure(report, metric: str, **kw):
    if metric == "csr":
        return csr_bins(report, **kw)
    if metric == "throughput":
        return throughput_series(report, **kw)
    if metric == "delivered_bytes":
        return delivered_by_subscriber(report)
    if metric == "cp_utilization":
        return cp_utilization(report, **kw)
    if metric == "attach_phase_ms":
        return attach_phase_ms(report)
    if metric == "drops":
        return drops_total(report)
    raise ValueError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
