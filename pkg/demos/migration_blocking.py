"""A censor that blocks migrated connections, and who else it hurts.

Under MIGRATION_BLOCK the censor remembers every connection ID it has seen
in a handshake and drops short-header packets carrying any other ID.  That
stops the split-path client, since its handshake was hidden in the tunnel.
It also stops an ordinary phone that started its connection on an
uncensored LTE link and then walked onto the censored Wi-Fi.

    python3 demos/migration_blocking.py
"""

import dataclasses

from quicstep_lab.harness import ExperimentConfig, build_roamer_scenario
from quicstep_lab.acceptance import REQUEST, run_fetch
from quicstep_lab.middlebox import CensorConfig, CensorMode
from quicstep_lab.quicstep import PolicyMode, fetch

blocking = ExperimentConfig(file_size=200_000, jitter_pct=0.0,
                            censor=CensorConfig(frozenset({CensorMode.MIGRATION_BLOCK})))
open_net = dataclasses.replace(blocking, censor=CensorConfig())

for label, cfg in (("no censor", open_net), ("MIGRATION_BLOCK", blocking)):
    print(f"\n{label}")
    sc, outcome = run_fetch(cfg, PolicyMode.QUICSTEP)
    print(f"  split-path client: success={outcome.success} reason={outcome.reason}")
    sc = build_roamer_scenario(cfg)
    outcome = fetch(sc.client, sc.sim, cfg.hostname, REQUEST, cfg.deadline_us)
    print(f"  roaming phone:     success={outcome.success} reason={outcome.reason} "
          f"migrations={outcome.migrations}")
    print(f"  censor verdicts:   {dict(sc.censor.state.counters)}")
