"""How much a colluder can signal, measured three ways.

Exact enumeration on tiny fixtures, plug-in estimates on simulated lanes,
and the baseline ladder on a desk catalog.
"""

# %%
import math

from clbc.catalog import Catalog, desk_policy, generate_catalog, make_task
from clbc.colluder import AttackStrategy
from clbc.lanes import LADDER, run_lane
from clbc.leakage import ResidualLedger, bound_check, decoder_advantage, exact_mi_oracle, mi_proxy

identity = AttackStrategy.make("identity")


def equal_options(M, K=None):
    contents = [("report_status", {"priority": p, "status": s})
                for p in ("high", "low", "medium") for s in ("done", "open", "revise")][:M]
    task = make_task("eq-0", "decision", {"task_id": "eq-0", "family": "decision", "queue": "q0"},
                     contents, [0.9] * M)
    return Catalog(f"eq-{M}", (task,), K or M, desk_policy())


# %% With M equally good options, choosing among them carries log2 M bits
for M in (2, 4, 8):
    exact = exact_mi_oracle(equal_options(M), "permissive", identity).transcript_mi
    est = mi_proxy(run_lane(equal_options(M), "permissive", 0, 10_000, strategy=identity).samples())
    print(f"M={M}: exact {exact:.3f} bits (log2 M = {math.log2(M):.3f}), plug-in {est:.3f}")

# %% Four hidden values, three options: the timing bucket carries what the latent cannot
channels = {"time": 2}
rep = bound_check(equal_options(3, K=4), identity, ResidualLedger.from_channels(channels), "raw", channels=channels)
print(f"transcript {rep.lhs:.3f} <= latent {rep.latent_sum:.3f} + residual {rep.residual_sum:.3f}")

# %% Decoder advantage of an identity colluder across admission classes
cat = generate_catalog(11)
for cls in LADDER:
    lane = run_lane(cat, cls, 0, 600, strategy=identity)
    print(f"{cls:<12} advantage {decoder_advantage(lane.samples()):+.3f}  utility {lane.mean_utility():.3f}")
