import numpy as np
import pytest

from clbc.audit import (
    CHECKS,
    AuditEpoch,
    EpochRegistry,
    build_packet,
    compare_epochs,
    corrupt_policy_hash,
    detection_probability,
    epoch_for,
    monte_carlo_detection,
    respond_and_verify,
    select_challenges,
    turn_validity,
    verify_packet,
)
from clbc.canonical import digest, extend_chain
from clbc.envelope import Envelope
from clbc.errors import BadM, BadParams, EpochMismatch, MissingTurn
from clbc.lanes import run_lane
from clbc.verifier import AdmittedRecord, ProofSettings


@pytest.fixture(scope="module")
def audited(catalog):
    lane = run_lane(catalog, "clbc_full", 0, 200)
    log = list(lane.verifier.state.admitted_log)
    return log, epoch_for(lane.verifier), [r.link.link for r in log]


def test_select_all_and_deterministic():
    assert select_challenges(20, 1, 20) == tuple(range(20))
    assert select_challenges(100, 42, 10) == select_challenges(100, 42, 10)
    assert len(set(select_challenges(100, 42, 10))) == 10
    with pytest.raises(BadM):
        select_challenges(10, 0, 11)
    with pytest.raises(BadM):
        select_challenges(10, 0, 0)


def test_selection_frequency():
    n, m, seeds = 100, 10, 10_000
    counts = np.zeros(n)
    for seed in range(seeds):
        counts[list(select_challenges(n, seed, m))] += 1
    p = m / n
    sigma = (seeds * p * (1 - p)) ** 0.5
    # 3 sigma per index, allowing the ~0.3% of indices a fair draw puts outside
    outside = np.sum(np.abs(counts - seeds * p) > 3 * sigma)
    assert outside <= 2


def test_honest_audit_passes(audited):
    log, epoch, heads = audited
    for seed in range(5):
        verdict = respond_and_verify(log, select_challenges(len(log), seed, 25), epoch, heads)
        assert verdict.passed and verdict.f_hat == 0.0
    assert respond_and_verify(log, range(len(log)), epoch, heads).passed


def test_policy_hash_swap(audited):
    log, epoch, heads = audited
    bad = list(log)
    bad[7] = corrupt_policy_hash(bad[7], digest(b"other policy"))
    verdict = respond_and_verify(bad, [3, 7, 9], epoch, heads)
    assert not verdict.passed and verdict.failures == [(7, "policy-hash binding")]


def test_chain_link_recomputed(audited):
    log, epoch, heads = audited
    rec = log[11]
    env = Envelope.from_bytes(rec.envelope_bytes)
    altered = env.replace(message=env.message + "!")
    link = extend_chain(rec.link.prev, altered.payload(), rec.link.turn_index)
    bad = list(log)
    bad[11] = AdmittedRecord(altered.to_bytes(), rec.verdict, link)
    verdict = respond_and_verify(bad, [11], epoch, heads)
    assert verdict.failures == [(11, "chain continuity")]


def test_proof_type_consistency(catalog):
    lane = run_lane(catalog, "clbc_full", 0, 12, proof_settings=ProofSettings("sampled", 6))
    log = lane.verifier.state.admitted_log
    heads = [r.link.link for r in log]
    sampled = epoch_for(lane.verifier)
    assert respond_and_verify(log, range(12), sampled, heads).passed
    strict_claim = AuditEpoch(sampled.epoch_id, sampled.policy_hash, sampled.verifier_version,
                              sampled.allowed_mechanisms, sampled.challenge_rate, 1, sampled.seed_commitment)
    failures = respond_and_verify(log, range(12), strict_claim, heads).failures
    assert failures and {c for _, c in failures} == {"proof-type consistency"}


def test_missing_turn(audited):
    log, epoch, heads = audited
    with pytest.raises(MissingTurn):
        build_packet(log, len(log), epoch.epoch_id)


def test_epoch_isolation(audited):
    log, epoch, heads = audited
    packet = build_packet(log, 0, epoch.epoch_id)
    other = AuditEpoch("epoch-1", epoch.policy_hash, epoch.verifier_version, epoch.allowed_mechanisms,
                       epoch.challenge_rate, epoch.proof_cadence, epoch.seed_commitment)
    with pytest.raises(EpochMismatch):
        verify_packet(packet, other, heads)
    repolicied = AuditEpoch(epoch.epoch_id, digest(b"v2 policy"), epoch.verifier_version,
                            epoch.allowed_mechanisms, epoch.challenge_rate, epoch.proof_cadence)
    assert verify_packet(packet, repolicied, heads) == CHECKS[0]
    v = respond_and_verify(log, [0], epoch, heads)
    with pytest.raises(EpochMismatch):
        compare_epochs(v, epoch, v, repolicied)
    assert compare_epochs(v, epoch, v, epoch)["f_hat"] == [0.0, 0.0]


def test_epoch_registry(tmp_path, audited):
    _, epoch, _ = audited
    reg = EpochRegistry([epoch])
    reg.register(epoch)
    changed = AuditEpoch(epoch.epoch_id, epoch.policy_hash, epoch.verifier_version, epoch.allowed_mechanisms, 0.5)
    with pytest.raises(EpochMismatch):
        reg.register(changed)
    reg.save(tmp_path / "epochs.json")
    assert EpochRegistry.load(tmp_path / "epochs.json").get(epoch.epoch_id) == epoch
    with pytest.raises(EpochMismatch):
        reg.get("never")
    value = epoch.to_value()
    value["challenge_rate"] = 0.9
    with pytest.raises(EpochMismatch):
        AuditEpoch.from_value(value)


def test_detection_probability():
    assert all(detection_probability(0.0, m) == 0.0 for m in range(20))
    assert detection_probability(0.1, 10) == pytest.approx(0.6513, abs=1e-4)
    with pytest.raises(BadParams):
        detection_probability(1.5, 3)


def test_monte_carlo_ten_percent(catalog):
    lane = run_lane(catalog, "clbc_full", 0, 1000)
    log = list(lane.verifier.state.admitted_log)
    epoch = epoch_for(lane.verifier)
    heads = [r.link.link for r in log]
    rng = np.random.default_rng(12)
    for t in rng.choice(1000, size=100, replace=False):
        log[t] = corrupt_policy_hash(log[t], digest(b"swap"))
    valid = turn_validity(log, epoch, heads)
    assert valid.sum() == 900
    rate = monte_carlo_detection(valid, 10, 10_000, seed=1)
    assert rate == pytest.approx(detection_probability(0.1, 10), abs=0.02)


def test_soundness_no_false_positives(audited):
    log, epoch, heads = audited
    assert turn_validity(log, epoch, heads).all()
    assert monte_carlo_detection(turn_validity(log, epoch, heads), 50, 2000, seed=0) == 0.0
