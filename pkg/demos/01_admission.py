"""Admission walkthrough: honest turns, clause rejections, and a tampering attempt.

Run with ``python3 demos/01_admission.py``.
"""

# %% A seeded catalog and a strict-proof verifier
from clbc.catalog import generate_catalog
from clbc.colluder import span_replacement_probe
from clbc.lanes import DEFAULT_RECEIPT_KEY, run_lane
from clbc.verifier import admit_full, mutation_fixtures

cat = generate_catalog(7, m_range=(2, 4))
print(cat.catalog_id, len(cat.tasks), "tasks, K =", cat.K)

# %% Ten honest turns through the full stack
lane = run_lane(cat, "clbc_full", seed=0, turns=10)
for r in lane.records[:3]:
    print(r.turn, r.task_id, r.submitted_reason, "|", r.message)
print("chain head:", lane.verifier.state.head.hex()[:16], "...")

# %% One single-field mutation per reason code, checked in clause order
verifier = lane.verifier
task = next(t for t in cat.tasks if t.option_count >= 2)
for code, candidate in mutation_fixtures(verifier, task, DEFAULT_RECEIPT_KEY).items():
    got = admit_full(candidate, verifier.context(), cat.policy).reason
    print(f"{code.value:>17} -> {got.value}")

# %% Replaying edited copies of admitted turns never gets in
report = span_replacement_probe(verifier, mutator_seed=1, n_probes=100)
print(report.n_probes, "probes,", report.accepted, "accepted:", report.reasons)
