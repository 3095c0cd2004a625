"""Attach storms against a gateway that can serve two attaches per second.

Prints the steady-state connection success rate for each offered load.
"""

from accessnet.simnet import builders, run_scenario
from accessnet.simnet.measure import csr_bins, mean_csr

CAPACITY = 2.0

if __name__ == "__main__":
    print(f"{'offered/s':>9}  {'csr':>5}  {'capacity/offered':>16}")
    for offered in (1, 2, 3, 4, 6):
        report = run_scenario(builders.overload(offered, capacity_per_s=CAPACITY))
        csr = mean_csr(csr_bins(report), 120_000, 300_000)
        print(f"{offered:>9}  {csr:5.3f}  {min(1.0, CAPACITY / offered):16.3f}")
