"""Operator command line.

Mutations and listings go through the orchestrator's northbound API, either
in-process against a local store file or over HTTP when
``ACCESSNET_ORCHESTRATOR`` names a running service.  ``run`` and
``report`` drive the simulator.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.error
import urllib.request
from typing import Optional, Sequence

from .model import AccessTechnology, canonical_json

ENDPOINT_ENV = "ACCESSNET_ORCHESTRATOR"
STORE_ENV = "ACCESSNET_STORE"
DEFAULT_STORE = "accessnet-store.json"

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, payload: Optional[dict] = None, code: int = EXIT_DOMAIN):
        super().__init__(message)
        self.payload = payload or {"error": message}
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class LocalBackend:
    def __init__(self, store_path: str):
        from .orchestrator import NorthboundApi, Orchestrator

        self.api = NorthboundApi(Orchestrator(path=store_path))

    def call(self, method: str, path: str, body=None) -> tuple[int, dict]:
        return self.api.handle(method, path, body)


class HttpBackend:
    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout

    def call(self, method: str, path: str, body=None) -> tuple[int, dict]:
        data = canonical_json(body) if body is not None else None
        req = urllib.request.Request(self.base + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read() or b"{}")
        except urllib.error.HTTPError as err:
            return err.code, json.loads(err.read() or b"{}")
        except urllib.error.URLError as err:
            raise CliError(f"cannot reach orchestrator at {self.base}: {err.reason}") from err


def backend(args):
    url = os.environ.get(ENDPOINT_ENV)
    if url:
        return HttpBackend(url)
    return LocalBackend(args.store or os.environ.get(STORE_ENV, DEFAULT_STORE))


def _api(args, method: str, path: str, body=None) -> dict:
    status, payload = backend(args).call(method, path, body)
    if status >= 400:
        raise CliError(payload.get("error", f"HTTP {status}"), payload)
    return payload


def _load_json(path: str):
    try:
        with open(path, "rb") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


# --- verbs ----------------------------------------------------------------------


def cmd_subscriber_add(args) -> dict:
    body = {
        "id": args.id,
        "auth_key": args.key,
        "policy_id": args.policy,
        "allowed_technologies": args.tech.split(","),
        "charging_mode": args.charging,
    }
    return _api(args, "POST", "/subscribers", body)


def cmd_subscriber_rm(args) -> dict:
    return _api(args, "DELETE", f"/subscribers/{args.id}")


def cmd_subscriber_list(args) -> dict:
    return _api(args, "GET", "/subscribers")


def cmd_policy_set(args) -> dict:
    doc = _load_json(args.file)
    policies = doc if isinstance(doc, list) else [doc]
    gen = None
    for p in policies:
        if not isinstance(p, dict) or "id" not in p:
            raise CliError("policy documents need an id", {"error": "policy documents need an id"})
        gen = _api(args, "PUT", f"/policies/{p['id']}", p)["generation"]
    return {"generation": gen}


def cmd_policy_list(args) -> dict:
    return _api(args, "GET", "/policies")


def cmd_agw_list(args) -> dict:
    return _api(args, "GET", "/agws")


def cmd_metrics_get(args) -> dict:
    if args.report:
        from .simnet.runner import RunReport

        samples = RunReport.read(args.report).metrics
        out = [
            m
            for m in samples
            if (args.source is None or m["source"] == args.source)
            and (args.name is None or m["name"] == args.name)
            and (args.from_ms is None or m["time_ms"] >= args.from_ms)
            and (args.to_ms is None or m["time_ms"] < args.to_ms)
        ]
        return {"metrics": out}
    query = "&".join(
        f"{k}={v}"
        for k, v in (("source", args.source), ("name", args.name), ("from_ms", args.from_ms), ("to_ms", args.to_ms))
        if v is not None
    )
    return _api(args, "GET", "/metrics" + (f"?{query}" if query else ""))


def cmd_run(args) -> dict:
    from .simnet import ScenarioError, run_scenario

    seed = args.seed
    try:
        report = run_scenario(args.scenario, seed=seed, out=args.out)
    except ScenarioError as exc:
        raise CliError("scenario rejected", {"error": "scenario rejected", "problems": exc.problems}) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {args.scenario}: {exc}") from exc
    s = report.summary
    return {k: s[k] for k in ("seed", "attach_attempts", "attach_successes", "csr", "delivered_bytes",
                              "trace_sha256", "metrics_sha256")} | {"out": args.out}


def cmd_report_summarize(args) -> dict:
    from .simnet.measure import attach_phase_ms, csr_bins, drops_total
    from .simnet.runner import RunReport

    try:
        report = RunReport.read(args.dir)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read report in {args.dir}: {exc}") from exc
    bins = csr_bins(report)
    return {
        "summary": report.summary,
        "csr_bins": bins,
        "attach_phase_ms": attach_phase_ms(report),
        "drops": drops_total(report),
    }


def cmd_serve(args) -> dict:
    from .orchestrator import NorthboundApi, Orchestrator, make_http_server

    server = make_http_server(
        NorthboundApi(Orchestrator(path=args.store or os.environ.get(STORE_ENV, DEFAULT_STORE))), args.host, args.port
    )
    print(f"serving on http://{server.server_address[0]}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {}


# --- output -----------------------------------------------------------------------


def _human(verb: str, payload: dict) -> str:
    if "subscribers" in payload:
        rows = payload["subscribers"]
        return "\n".join(
            f"{s['id']}  policy={s['policy_id']}  tech={','.join(s['allowed_technologies'])}  {s['charging_mode']}"
            for s in rows
        ) or "(no subscribers)"
    if "policies" in payload:
        lines = []
        for p in payload["policies"]:
            phases = " -> ".join(
                f"{ph['rate_limit_bps']}bps"
                + (f" until {ph['byte_threshold']}B" if ph.get("byte_threshold") is not None else "")
                + (f" for {ph['duration']}ms" if ph.get("duration") is not None else "")
                for ph in p["phases"]
            )
            lines.append(f"{p['id']}: {phases}")
        return "\n".join(lines) or "(no policies)"
    if "agws" in payload:
        return "\n".join(
            f"{a['agw_id']}  acked_generation={a['last_acked_generation']}  "
            f"connected={a['connected']}  in_sync={a['in_sync']}"
            for a in payload["agws"]
        ) or "(no agws)"
    if "metrics" in payload:
        return "\n".join(f"{m['time_ms']}  {m['source']}  {m['name']}={m['value']}" for m in payload["metrics"])
    if "csr_bins" in payload:
        s = payload["summary"]
        lines = [
            f"attempts={s['attach_attempts']} successes={s['attach_successes']} csr={s['csr']}",
            f"delivered_bytes={s['delivered_bytes']} attach_phase_ms={payload['attach_phase_ms']}",
            "drops: " + ", ".join(f"{k}={v}" for k, v in payload["drops"].items()),
        ]
        lines += [f"  bin {b['bin_start_ms']:>8}: {b['successes']}/{b['attempts']}" for b in payload["csr_bins"]]
        return "\n".join(lines)
    if "trace_sha256" in payload:
        return (
            f"csr={payload['csr']} ({payload['attach_successes']}/{payload['attach_attempts']})  "
            f"delivered_bytes={payload['delivered_bytes']}\ntrace {payload['trace_sha256']}"
        )
    if "generation" in payload:
        return f"generation {payload['generation']}"
    return ""


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="accessnet", description="Operate the simulated access network.")
    p.add_argument("--json", action="store_true", help="emit canonical JSON")
    p.add_argument("--store", help=f"local store file (default ${STORE_ENV} or {DEFAULT_STORE})")
    verbs = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    verbs.required = True

    sub = verbs.add_parser("subscriber", help="manage subscribers").add_subparsers(dest="action", parser_class=_Parser)
    sub.required = True
    add = sub.add_parser("add")
    add.add_argument("--id", required=True)
    add.add_argument("--key", required=True, help="16-byte key as hex")
    add.add_argument("--policy", required=True)
    add.add_argument("--tech", default=",".join(t.value for t in AccessTechnology))
    add.add_argument("--charging", default="unlimited", choices=["unlimited", "quota"])
    add.set_defaults(fn=cmd_subscriber_add)
    rm = sub.add_parser("rm")
    rm.add_argument("id")
    rm.set_defaults(fn=cmd_subscriber_rm)
    sub.add_parser("list").set_defaults(fn=cmd_subscriber_list)

    pol = verbs.add_parser("policy", help="manage policies").add_subparsers(dest="action", parser_class=_Parser)
    pol.required = True
    pset = pol.add_parser("set")
    pset.add_argument("file", help="JSON policy object or list of them")
    pset.set_defaults(fn=cmd_policy_set)
    pol.add_parser("list").set_defaults(fn=cmd_policy_list)

    agw = verbs.add_parser("agw", help="inspect gateways").add_subparsers(dest="action", parser_class=_Parser)
    agw.required = True
    agw.add_parser("list").set_defaults(fn=cmd_agw_list)

    met = verbs.add_parser("metrics", help="query metrics").add_subparsers(dest="action", parser_class=_Parser)
    met.required = True
    mget = met.add_parser("get")
    mget.add_argument("--source")
    mget.add_argument("--name")
    mget.add_argument("--from-ms", type=float)
    mget.add_argument("--to-ms", type=float)
    mget.add_argument("--report", help="read metrics.jsonl from a run directory instead of the service")
    mget.set_defaults(fn=cmd_metrics_get)

    run = verbs.add_parser("run", help="run a scenario")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="report")
    run.set_defaults(fn=cmd_run)

    rep = verbs.add_parser("report", help="inspect run output").add_subparsers(dest="action", parser_class=_Parser)
    rep.required = True
    summ = rep.add_parser("summarize")
    summ.add_argument("dir")
    summ.set_defaults(fn=cmd_report_summarize)

    srv = verbs.add_parser("serve", help="run the northbound API over HTTP")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8080)
    srv.set_defaults(fn=cmd_serve)
    return p


def dispatch(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        payload = args.fn(args)
    except CliError as exc:
        if args.json:
            out.write(canonical_json(exc.payload).decode() + "\n")
        else:
            err.write(f"error: {exc}\n")
            for v in exc.payload.get("report", {}).get("violations", []):
                err.write(f"  {v['path']}: {v['message']}\n")
            for prob in exc.payload.get("problems", []):
                err.write(f"  {prob}\n")
        return exc.code
    if args.json:
        out.write(canonical_json(payload).decode() + "\n")
    else:
        text = _human(args.verb, payload)
        if text:
            out.write(text + "\n")
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
