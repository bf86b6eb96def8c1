"""Challenge audits of a transcript, then a small staged evaluation run.

Writes its artifacts under a temporary directory.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from clbc.audit import (corrupt_policy_hash, detection_probability, epoch_for, monte_carlo_detection,
                        respond_and_verify, select_challenges, turn_validity)
from clbc.canonical import Digest
from clbc.catalog import desk_policy, generate_catalog
from clbc.colluder import AttackConfig
from clbc.lanes import run_lane
from clbc.pipeline import RunConfig, emit_report, init_run, run_all

# %% Audit an honest 500-turn transcript with ten seeded challenges
lane = run_lane(generate_catalog(41), "clbc_full", 0, 500)
log = list(lane.verifier.state.admitted_log)
heads = [r.link.link for r in log]
epoch = epoch_for(lane.verifier)
print(respond_and_verify(log, select_challenges(len(log), 0, 10), epoch, heads).passed)

# %% Corrupt 5% of the turns and compare detection with the closed form
bad = set(np.random.default_rng(0).choice(len(log), 25, replace=False).tolist())
corrupted = [corrupt_policy_hash(r, Digest(bytes(32))) if i in bad else r for i, r in enumerate(log)]
valid = turn_validity(corrupted, epoch, heads)
for m in (5, 10, 50):
    print(f"m={m:>2}: simulated {monte_carlo_detection(valid, m, 10_000, seed=m):.3f}, "
          f"closed form {detection_probability(0.05, m):.3f}")

# %% A reduced-budget end-to-end run and its report bundle
root = Path(tempfile.mkdtemp(prefix="clbc-demo-"))
policy = desk_policy()
config = RunConfig(strict_turns=200, robustness_turns=100, attack_eval_turns=100,
                   baseline_turns=120, baseline_screen_turns=60)
manifest = init_run(root, policy, [generate_catalog(s, policy=policy) for s in (11, 12)],
                    attack=AttackConfig(turns_per_eval=60), config=config)
summary = run_all(root)
print("run", manifest.run_id, summary["verdict"], summary["reasons"])
emit_report(root)
print((root / "report" / "frontier.csv").read_text())
