"""Fetch a page through a censor that drops every handshake packet.

Native QUIC never gets past its first Initial.  The split-path client hides
DNS and the handshake inside the tunnel, then moves the established
connection onto the direct path, where the censor only sees short headers.

    python3 demos/censored_fetch.py
"""

from quicstep_lab.acceptance import run_fetch
from quicstep_lab.harness import ExperimentConfig, PROXY_ADDR
from quicstep_lab.middlebox import CensorConfig, CensorMode
from quicstep_lab.netsim import TraceDirection
from quicstep_lab.quicstep import PolicyMode

cfg = ExperimentConfig(
    file_size=50_000,
    jitter_pct=0.0,
    censor=CensorConfig(frozenset({CensorMode.DROP_ALL_HANDSHAKE})),
)

for policy in (PolicyMode.NATIVE, PolicyMode.QUICSTEP):
    sc, outcome = run_fetch(cfg, policy)
    status = f"done in {outcome.completion_time / 1000:.1f} ms" if outcome.success else f"failed ({outcome.reason})"
    print(f"{policy.value:>9}: {status}, handshake attempts {outcome.handshake_attempts}")
    print(f"           censor verdicts {dict(sc.censor.state.counters)}")

# what the censor saw during the successful fetch
sc, _ = run_fetch(cfg, PolicyMode.QUICSTEP)
print("\nfirst datagrams crossing the censor (split-path client):")
shown = 0
for rec in sc.sim.trace:
    if rec.node != "censor" or rec.direction is not TraceDirection.FWD:
        continue
    leg = "tunnel" if PROXY_ADDR in (rec.src, rec.dst) else "direct"
    print(f"  t={rec.time / 1000:7.1f} ms  {leg:<6}  {rec.form:<6} {rec.size:>5} B  {rec.note}")
    shown += 1
    if shown == 14:
        break
