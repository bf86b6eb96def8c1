import csv
import shutil

import pytest

from clbc.catalog import desk_policy, generate_catalog
from clbc.colluder import AttackConfig, GateConfig
from clbc.errors import (
    BadParams,
    InsufficientSeeds,
    MalformedSummary,
    PolicyHashDrift,
    StaleArtifact,
    ThresholdError,
)
from clbc.pipeline import (
    DEFAULT_THRESHOLDS,
    STAGES,
    ArtifactStore,
    RunManifest,
    baseline_sweep,
    emit_report,
    latency_profile,
    run_all,
    run_stage,
    schema_only_fixture,
)
from clbc.verifier import ProofSettings

from conftest import start_run


def clone(run, tmp_path):
    dst = tmp_path / "run"
    shutil.copytree(run[0], dst)
    return dst


def reseal_summary(root, stage, edit):
    """Forge a coherent run: rewrite one stage summary, repoint its consumers, re-seal."""
    manifest = RunManifest.load(root)
    store = ArtifactStore(root)
    summary = store.get(stage, manifest.stages[stage]["outputs"]["summary"])
    edit(summary)
    new = store.put(summary)
    manifest.stages[stage]["outputs"]["summary"] = new
    for entry in manifest.stages.values():
        if f"{stage}/summary" in entry["inputs"]:
            entry["inputs"][f"{stage}/summary"] = new
    manifest.save(root)


def test_default_run_passes(full_run):
    root, summary = full_run
    assert summary["verdict"] == "PASS", summary["reasons"]
    assert all(row["passed"] for row in summary["rows"])
    assert [nc["passed"] for nc in summary["negative_controls"]] == [False, False]
    manifest = RunManifest.load(root)
    assert set(manifest.stages) == set(STAGES)
    assert set(manifest.catalog_digests) == {"desk-11", "desk-12"}


def test_missing_attacker_summary(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    manifest = RunManifest.load(root)
    ArtifactStore(root).path(manifest.stages["attacker"]["outputs"]["summary"]).unlink()
    with pytest.raises(MalformedSummary):
        run_stage("aggregate", root)


def test_attacker_stage_absent_from_manifest(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    manifest = RunManifest.load(root)
    del manifest.stages["attacker"]
    manifest.save(root)
    with pytest.raises(MalformedSummary):
        run_stage("aggregate", root)


def test_catalog_edited_after_strict(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    manifest = RunManifest.load(root)
    path = ArtifactStore(root).path(manifest.catalog_digests["desk-11"])
    path.write_bytes(path.read_bytes().replace(b"high", b"hiGh", 1))
    with pytest.raises(StaleArtifact):
        run_stage("robustness_sweep", root)


def test_summary_under_other_policy(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    reseal_summary(root, "strict_leakage", lambda s: s.update(policy_hash="00" * 32))
    with pytest.raises(PolicyHashDrift):
        run_stage("aggregate", root)


def test_hand_edited_manifest(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    p = root / "manifest.json"
    p.write_bytes(p.read_bytes().replace(b"desk-11", b"desk-13", 1))
    with pytest.raises(StaleArtifact):
        run_stage("aggregate", root)


def test_replaced_input_makes_downstream_stale(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    manifest = RunManifest.load(root)
    manifest.inputs["attack_config"] = ArtifactStore(root).put(AttackConfig(turns_per_eval=61).to_value())
    manifest.save(root)
    with pytest.raises(StaleArtifact):
        run_stage("aggregate", root)


def test_missing_trace_reference(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    reseal_summary(root, "attacker", lambda s: s.update(trace_digest="ab" * 32))
    with pytest.raises(MalformedSummary):
        run_stage("aggregate", root)


def test_failed_stage_leaves_manifest_alone(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    before = (root / "manifest.json").read_bytes()
    ArtifactStore(root).path(RunManifest.load(root).stages["baselines"]["outputs"]["summary"]).unlink()
    with pytest.raises(MalformedSummary):
        run_stage("aggregate", root)
    assert (root / "manifest.json").read_bytes() == before


@pytest.mark.parametrize("name,value", [
    ("strict_max_adv", 0.005),
    ("baseline_raw_min_adv", 0.95),
    ("strict_min_utility", 0.99),
])
def test_suspiciously_tight_threshold(tmp_path, name, value):
    th = {**DEFAULT_THRESHOLDS, "thresholds": {**DEFAULT_THRESHOLDS["thresholds"]}}
    th["thresholds"][name] = {**th["thresholds"][name], "value": value}
    with pytest.raises(ThresholdError):
        start_run(tmp_path, thresholds=th)
    assert not (tmp_path / "manifest.json").exists()


def test_threshold_file_missing_metric(tmp_path):
    th = {**DEFAULT_THRESHOLDS, "thresholds": dict(DEFAULT_THRESHOLDS["thresholds"])}
    del th["thresholds"]["baseline_security_gap"]
    with pytest.raises(ThresholdError):
        start_run(tmp_path, thresholds=th)


def test_raw_identity_control_passing_fails_run(full_run, tmp_path):
    root = clone(full_run, tmp_path)

    def weaken(s):
        for nc in s["negative_controls"]:
            if nc["name"] == "raw_class_identity_colluder":
                nc["max_adv"] = 0.0

    reseal_summary(root, "attacker", weaken)
    summary = run_stage("aggregate", root).summary
    assert summary["verdict"] == "FAIL"
    assert "negative-control-pass:raw_class_identity_colluder" in summary["reasons"]


def test_degenerate_control_passing_fails_run(tmp_path):
    # gates so loose that a one-step search clears them
    start_run(tmp_path, attack=AttackConfig(gates=GateConfig(0.0, 1, 1), turns_per_eval=60))
    summary = run_all(tmp_path)
    assert summary["verdict"] == "FAIL"
    assert "negative-control-pass:degenerate_attacker_gates" in summary["reasons"]


def test_report_bundle_reproducible(tmp_path):
    bundles = []
    for name in ("a", "b"):
        root = tmp_path / name
        start_run(root)
        run_all(root)
        digests = emit_report(root, tmp_path / f"report-{name}")
        assert digests == emit_report(root, tmp_path / f"again-{name}")
        bundles.append(digests)
    assert bundles[0] == bundles[1]
    for fname in bundles[0]:
        assert (tmp_path / "report-a" / fname).read_bytes() == (tmp_path / "report-b" / fname).read_bytes()


def test_report_contents(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    emit_report(root, tmp_path / "rep")
    lines = (tmp_path / "rep" / "frontier.csv").read_text().splitlines()
    assert "schema_only_fixture,0.900,0.000,0.000" in lines
    rows = list(csv.DictReader(lines))
    assert [r["label"] for r in rows][:7] == ["raw", "audit_only", "sanitize", "paraphrase", "overseer",
                                             "schema_only", "clbc_full"]
    reasons = list(csv.DictReader((tmp_path / "rep" / "reason_codes.csv").read_text().splitlines()))
    assert {"source", "reason", "count"} == set(reasons[0])


def test_report_refuses_corrupt_run(full_run, tmp_path):
    root = clone(full_run, tmp_path)
    manifest = RunManifest.load(root)
    path = ArtifactStore(root).path(manifest.stages["strict_leakage"]["outputs"]["summary"])
    path.write_bytes(path.read_bytes() + b" ")
    with pytest.raises(StaleArtifact):
        emit_report(root, tmp_path / "rep")
    assert not (tmp_path / "rep" / "report.json").exists()


def test_artifact_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CLBC_ARTIFACT_ROOT", str(tmp_path))
    start_run(None)
    assert run_stage("conformance").summary["passed"]
    assert (tmp_path / "manifest.json").exists()


def test_schema_only_fixture():
    fx = schema_only_fixture(desk_policy())
    assert all(t.option_count == 1 for t in fx.tasks)
    assert {t.option_utilities for t in fx.tasks} == {(5 / 6,)}


def test_baseline_sweep_needs_seeds():
    with pytest.raises(InsufficientSeeds):
        baseline_sweep([generate_catalog(11)], seeds=(0, 1, 2))


def test_latency_strict_and_sampled():
    strict = latency_profile(ProofSettings("strict", 1), 5.0, 100)
    assert strict.proof_rate == 1.0 and strict.nonproved_median_ms is None
    assert 5.0 <= strict.median_ms < 15.0
    sampled = latency_profile(ProofSettings("sampled", 6), 5.0, 120)
    assert sampled.proof_rate == pytest.approx(20 / 120)
    assert sampled.nonproved_median_ms < 5.0
    assert latency_profile(ProofSettings("sampled", 1), 0.0, 100).proof_rate == 1.0


def test_latency_needs_turns():
    with pytest.raises(BadParams):
        latency_profile(ProofSettings(), 1.0, 99)
