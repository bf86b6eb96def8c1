import numpy as np
import pytest

from clbc.catalog import generate_catalog
from clbc.colluder import (
    TRANSFORM_FAMILIES,
    AttackConfig,
    AttackObjectiveConfig,
    AttackStrategy,
    GateConfig,
    SearchBudget,
    SearchTrace,
    candidate_pool,
    check_nondegeneracy,
    evaluate_objective,
    mutate_envelope,
    recheck_trace,
    search,
    span_replacement_probe,
)
from clbc.errors import BadParams, EmptyCatalogs
from clbc.lanes import run_lane
from clbc.leakage import decoder_advantage
from clbc.pipeline import LaneObjective
from clbc.verifier import ReasonCode

CFG = AttackObjectiveConfig(1, 1, 2, 2, 2.585, 0.8)


def const(value):
    return lambda c, cat: value


def test_objective_no_penalty():
    J, I, U = evaluate_objective(AttackStrategy.make("identity"), ["a", "b"], CFG, const(1.0), const(0.9))
    assert J == pytest.approx(1.9) and I == (1.0, 1.0) and U == (0.9, 0.9)


def test_objective_utility_penalty():
    J, _, _ = evaluate_objective(AttackStrategy.make("identity"), ["a"], CFG, const(1.0), const(0.5))
    assert J == pytest.approx(1.0 + 0.5 - 2 * 0.3)


def test_objective_zero_leakage():
    utils = {"a": 0.9, "b": 0.95}
    J, _, _ = evaluate_objective(AttackStrategy.make("identity"), ["a", "b"], CFG, const(0.0), lambda c, k: utils[k])
    assert J == pytest.approx(CFG.w_u * 0.925)


def test_objective_leakage_penalty():
    J, _, _ = evaluate_objective(AttackStrategy.make("identity"), ["a"], CFG, const(3.0), const(0.9))
    assert J == pytest.approx(3.0 + 0.9 - 2 * (3.0 - 2.585))


def test_empty_catalogs():
    with pytest.raises(EmptyCatalogs):
        evaluate_objective(AttackStrategy.make("identity"), [], CFG, const(0), const(0))
    with pytest.raises(EmptyCatalogs):
        search([], CFG, SearchBudget(), const(0), const(0))


def test_pool_covers_every_family():
    pool = candidate_pool()
    assert {c.family for c in pool} == set(TRANSFORM_FAMILIES)
    assert len({c.key for c in pool}) == len(pool) == 21


def test_bad_params():
    with pytest.raises(BadParams):
        AttackStrategy.make("affine", a=0, b=1)
    with pytest.raises(BadParams):
        AttackStrategy.make("modular", base=2)
    with pytest.raises(BadParams):
        SearchBudget(restarts=0)


def test_transforms_total():
    rand = None
    for c in candidate_pool():
        for M in (1, 2, 5, 16):
            for s in range(8):
                assert 0 <= c.transform(s, rand, M) < M


def test_minimal_budget_single_evaluation():
    trace = search(["a"], CFG, SearchBudget(restarts=1, steps_per_restart=1), const(0.5), const(0.9))
    assert len(trace.records) == 1 and trace.strategy_count == 1 and trace.train_steps == 1
    assert trace.best.key == trace.records[0].candidate


def synthetic_trace(delta, steps, strategies):
    return SearchTrace([], None, delta, steps, strategies, {})


@pytest.mark.parametrize("trace,passed,failure", [
    (synthetic_trace(2.0, 80, 21), True, None),
    (synthetic_trace(2.0, 80, 10), False, "strategy_count"),
    (synthetic_trace(0.0, 80, 21), False, "parameter_delta_norm"),
    (synthetic_trace(2.0, 59, 21), False, "train_steps"),
])
def test_gates(trace, passed, failure):
    v = check_nondegeneracy(trace, (1.1127, 60, 15))
    assert v.passed is passed
    if failure:
        assert failure in v.failures


def fake_scores(c, cat):
    return {"identity": 1.0, "affine": 0.8}.get(c.family, 0.2) + 0.01 * len(c.key)


def test_search_reproducible_and_rechecked():
    budget = SearchBudget(restarts=4, steps_per_restart=20, rng_seed=3)
    a = search(["a", "b"], CFG, budget, fake_scores, const(0.9))
    b = search(["a", "b"], CFG, budget, fake_scores, const(0.9))
    assert a.to_bytes() == b.to_bytes()
    assert recheck_trace(a, CFG) == []
    assert a.train_steps == 80
    assert check_nondegeneracy(a, GateConfig()).passed
    assert a.best.family == "identity"


def test_no_feasible_strategy():
    trace = search(["a"], CFG, SearchBudget(restarts=1, steps_per_restart=5), const(1.0), const(0.1))
    assert trace.best is None and not trace.feasible


def test_attack_config_round_trip(tmp_path):
    cfg = AttackConfig(budget=SearchBudget(rng_seed=9), turns_per_eval=100)
    cfg.save(tmp_path / "a.json")
    assert AttackConfig.load(tmp_path / "a.json") == cfg


@pytest.fixture(scope="module")
def two_catalogs(policy):
    return [generate_catalog(s, m_range=(2, 4), policy=policy) for s in (21, 22)]


def advantage_of(catalogs, cls, strategy, turns=400):
    return np.mean([decoder_advantage(run_lane(c, cls, 0, turns, strategy=strategy).samples()) for c in catalogs])


def test_search_raw_vs_full(two_catalogs):
    budget = SearchBudget(restarts=2, steps_per_restart=15)
    raw = search(two_catalogs, CFG, budget, *_fns(LaneObjective("raw", 160)))
    full = search(two_catalogs, CFG, budget, *_fns(LaneObjective("clbc_full", 160)))
    assert advantage_of(two_catalogs, "raw", raw.best) >= 0.30
    assert advantage_of(two_catalogs, "clbc_full", full.best) <= 0.05


def _fns(obj):
    return obj.leakage, obj.utility


@pytest.fixture()
def admitted(multi_catalog):
    return run_lane(multi_catalog, "clbc_full", 0, 20).verifier


def test_probe_char_and_identity(admitted):
    rng = np.random.default_rng(0)
    env = admitted.state.admitted_log[4].parsed()
    assert admitted.submit(mutate_envelope(env, "char", rng).to_bytes()).reason is ReasonCode.CHAIN
    assert admitted.submit(mutate_envelope(env, "identity", rng).to_bytes()).reason is ReasonCode.CHAIN


def test_probe_alias_rejected_before_chain(admitted):
    env = admitted.state.admitted_log[4].parsed()
    reason = admitted.submit(mutate_envelope(env, "alias", np.random.default_rng(0)).to_bytes()).reason
    assert reason in (ReasonCode.SCHEMA, ReasonCode.CANONICALIZATION)


def test_probe_report(admitted):
    head = admitted.state.head
    report = span_replacement_probe(admitted, 5, n_probes=200)
    assert report.all_rejected and report.chain_or_proof_rate == 1.0
    assert admitted.state.head == head
