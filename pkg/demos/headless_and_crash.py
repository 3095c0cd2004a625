"""Two failure stories.

First the orchestrator goes away during an attach storm: cached subscribers
keep attaching, a subscriber added mid-outage waits for the link to heal.
Then one of three gateways crashes and restores from its last checkpoint
while the other two carry on untouched.
"""

from accessnet.simnet import builders, run_scenario


def headless():
    t0, t1 = 10_000, 60_000
    report = run_scenario(builders.headless(cached=100, outage=(t0, t1)))
    res = [r for r in report.trace if r["ev"] == "attach_result"]
    cached = [r for r in res if r["subscriber"] != "001019999999999"]
    fresh = [r for r in res if r["subscriber"] == "001019999999999"]
    ok = next(r for r in fresh if r["ok"])
    print(f"orchestrator down {t0 / 1000:.0f}-{t1 / 1000:.0f} s")
    print(f"  cached subscribers attached: {sum(r['ok'] for r in cached)}/{len(cached)}")
    print(f"  new subscriber: {len(fresh) - 1} failed tries, then in at {ok['t'] / 1000:.2f} s")


def crash():
    fault = {"kind": "agw_crash", "agw": "agw1", "t_ms": 35_500, "restore_ms": 45_000}
    clean = run_scenario(builders.multi_agw())
    hit = run_scenario(builders.multi_agw(crash=fault))
    rest = lambda r: [x for x in r.trace if x.get("agw") in ("agw2", "agw3")]
    restore = next(x for x in hit.trace if x["ev"] == "agw_restore")
    print("agw1 crashes at 35.5 s, restored at 45 s")
    print(f"  agw2/agw3 traces identical to the no-fault run: {rest(clean) == rest(hit)}")
    print(f"  sessions restored: {restore['sessions']}, digest matches checkpoint: "
          f"{restore['session_digest'] == restore['checkpoint_digest']}")


if __name__ == "__main__":
    headless()
    crash()
