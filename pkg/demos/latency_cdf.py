"""Completion-time distributions for the three client policies.

Runs paired trials over the default topology (proxy near the server) and
the far-proxy profile, prints a few quantiles next to the closed-form
prediction, and writes the CSV artifacts under ``demo-out/``.

    python3 demos/latency_cdf.py [trials]
"""

import sys

import numpy as np

from quicstep_lab.harness import PROFILES, ExperimentConfig, analytic_latency, emit, run_experiment
from quicstep_lab.quicstep import PolicyMode

trials = int(sys.argv[1]) if len(sys.argv) > 1 else 40

for name, legs in PROFILES.items():
    cfg = ExperimentConfig(legs=legs, trials=trials, file_size=1_000_000, jitter_pct=10.0)
    result = run_experiment(cfg)
    print(f"\n{name}: direct RTT {legs.direct_rtt / 1000:.0f} ms, tunnel RTT {legs.tunnel_rtt / 1000:.0f} ms")
    print(f"  {'policy':<9} {'p10':>8} {'p50':>8} {'p90':>8} {'oracle':>8}  (ms)")
    for policy in cfg.policies:
        ok = [s.completion_us for s in result.samples if s.policy is policy and s.success]
        q = np.percentile(ok, [10, 50, 90])
        print(f"  {policy.value:<9} " + " ".join(f"{v / 1000:8.1f}" for v in q)
              + f" {analytic_latency(policy, cfg) / 1000:8.1f}")
    out = f"demo-out/{name}"
    emit(result, out)
    print(f"  artifacts in {out}/")

# the split path's fixed cost does not grow with the file, the tunnel's does
print("\nextra time over native, zero jitter (ms):")
print(f"  {'size':>10} {'quicstep':>9} {'tunnel':>9}")
for size in (100_000, 1_000_000, 10_000_000):
    cfg = ExperimentConfig(file_size=size, jitter_pct=0.0)
    native = analytic_latency(PolicyMode.NATIVE, cfg)
    split = analytic_latency(PolicyMode.QUICSTEP, cfg) - native
    tunnel = analytic_latency(PolicyMode.FULL_TUNNEL, cfg) - native
    print(f"  {size:>10} {split / 1000:9.1f} {tunnel / 1000:9.1f}")
