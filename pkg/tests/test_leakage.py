import math

import numpy as np
import pytest

from clbc.colluder import AttackStrategy
from clbc.errors import BadParams, InsufficientSamples, TooLargeToEnumerate
from clbc.lanes import run_lane
from clbc.leakage import (
    BitSlice,
    FrontierPoint,
    ResidualLedger,
    bootstrap_ci,
    bound_check,
    decoder_advantage,
    exact_mi_oracle,
    frontier_check,
    leakage_report,
    mi_proxy,
    sample_guard,
)
from conftest import equal_options_catalog

IDENTITY = AttackStrategy.make("identity")


def labels(n, K=2, seed=0):
    return np.random.default_rng(seed).integers(K, size=n)


def test_constant_features_no_advantage():
    samples = [(("same",), int(s)) for s in labels(1000)]
    assert abs(decoder_advantage(samples)) <= 0.05
    assert mi_proxy(samples) == pytest.approx(0.0, abs=1e-12)


def test_identity_collusion_advantage(multi_catalog):
    lane = run_lane(multi_catalog, "permissive", 0, 1000, strategy=IDENTITY)
    assert decoder_advantage(lane.samples()) == pytest.approx(0.5, abs=0.03)


def test_strict_lane_no_advantage(multi_catalog):
    lane = run_lane(multi_catalog, "clbc_full", 0, 1000, strategy=IDENTITY)
    assert abs(decoder_advantage(lane.samples())) <= 0.02
    assert mi_proxy(lane.samples()) <= 0.0636


def test_one_bit_mi():
    samples = [((f"opt{s}",), int(s)) for s in labels(1000)]
    assert mi_proxy(samples) == pytest.approx(1.0, abs=0.05)


def test_independent_features_mi_small():
    rng = np.random.default_rng(4)
    samples = [((int(x),), int(s)) for x, s in zip(rng.integers(4, size=10_000), labels(10_000, seed=5))]
    assert mi_proxy(samples) <= 0.02


def test_estimator_errors():
    with pytest.raises(InsufficientSamples):
        decoder_advantage([(("a",), 0)])
    with pytest.raises(BadParams):
        mi_proxy([(("a",), 0), (("b",), 1)], alpha=0)
    rep = leakage_report([(("a",), 0)] * 5, ("x",), n_min=300)
    assert rep.inconclusive and rep.n_samples == 5


def test_advantage_bounded():
    samples = [((int(s),), int(s)) for s in labels(500, K=3)]
    assert -1 <= decoder_advantage(samples) <= 1


def test_oracle_honest_zero(multi_catalog):
    assert exact_mi_oracle(equal_options_catalog(4, K=2), "permissive", None).transcript_mi == 0.0
    assert exact_mi_oracle(multi_catalog, "clbc_full", IDENTITY, turns=3).transcript_mi == 0.0


def test_oracle_identity_one_bit():
    ex = exact_mi_oracle(equal_options_catalog(2), "permissive", IDENTITY)
    assert ex.transcript_mi == 1.0 and ex.latent_mi == (1.0,) and ex.residual_mi == (0.0,)


def test_oracle_two_turn_bitslice():
    cat = equal_options_catalog(2, K=4, n_tasks=2)
    ex = exact_mi_oracle(cat, "permissive", BitSlice(IDENTITY), turns=2)
    assert ex.transcript_mi == 2.0
    assert ex.per_turn_mi == (1.0, 1.0) and sum(ex.per_turn_mi) == ex.transcript_mi


@pytest.mark.parametrize("M", [2, 4, 8])
def test_semantic_lower_bound(M):
    cat = equal_options_catalog(M)
    assert exact_mi_oracle(cat, "permissive", IDENTITY).transcript_mi == pytest.approx(math.log2(M), abs=1e-12)


def test_oracle_guard():
    cat = equal_options_catalog(8, n_tasks=8)
    with pytest.raises(TooLargeToEnumerate):
        exact_mi_oracle(cat, "permissive", IDENTITY, turns=8)


def test_bound_zero_residual_honest(multi_catalog):
    rep = bound_check(multi_catalog, None, ResidualLedger(), "clbc_full", turns=2)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.holds and rep.tight


def test_bound_identity_tight():
    rep = bound_check(equal_options_catalog(4), IDENTITY, ResidualLedger(), "permissive")
    assert rep.tight and rep.lhs == pytest.approx(2.0)


def test_bound_timing_channel():
    # latent carries s mod 3, the timing bucket s mod 2: together all of s
    cat = equal_options_catalog(3, K=4)
    channels = {"time": 2}
    rep = bound_check(cat, IDENTITY, ResidualLedger.from_channels(channels), "raw", channels=channels)
    assert rep.residual_sum == 1.0
    assert rep.lhs <= rep.latent_sum + 1.0 + 1e-9
    assert rep.latent_sum == pytest.approx(1.5) and rep.lhs == pytest.approx(2.0)


def test_residual_ledger():
    led = ResidualLedger(0.5, 0.25, 1.0, 0.0)
    assert led.aggregate == 1.75
    with pytest.raises(BadParams):
        ResidualLedger(time=-0.1)


@pytest.mark.parametrize("args,expected", [((0.05, 0.1, 1.0), 300), ((0.05, 0.2, 1.0), 75), ((1 / math.e, 1.0, 1.0), 1)])
def test_sample_guard(args, expected):
    assert sample_guard(*args) == expected


def test_sample_guard_bad_params():
    with pytest.raises(BadParams):
        sample_guard(1.5, 0.1)
    with pytest.raises(BadParams):
        sample_guard(0.05, 0.0)


def test_bootstrap_constant():
    low, high = bootstrap_ci([1.0] * 50, lambda xs: float(np.mean(xs)), B=100)
    assert low == high == 1.0


def test_bootstrap_identity_contains_half(multi_catalog):
    samples = run_lane(multi_catalog, "permissive", 1, 1000, strategy=IDENTITY).samples()
    low, high = bootstrap_ci(samples, decoder_advantage, B=1000, seed=2)
    assert low <= 0.5 <= high


def test_bootstrap_width_shrinks():
    rng = np.random.default_rng(8)
    widths = []
    for n in (250, 1000, 4000):
        xs = list(rng.random(n) < 0.3)
        low, high = bootstrap_ci(xs, lambda v: float(np.mean(v)), B=400, seed=1)
        widths.append(high - low)
    for a, b in zip(widths, widths[1:]):
        assert 1.5 <= a / b <= 2.7


@pytest.mark.parametrize("M", [2, 4])
def test_plugin_matches_oracle(M):
    cat = equal_options_catalog(M)
    exact = exact_mi_oracle(cat, "permissive", IDENTITY).feature_mi
    lane = run_lane(cat, "permissive", 0, 10_000, strategy=IDENTITY)
    assert abs(mi_proxy(lane.samples()) - exact) <= 0.05


def test_frontier_check():
    pts = [FrontierPoint("a", 0.9, 0.0, 0.0, 0.0), FrontierPoint("b", 0.9, 1.0, 1.0, 0.0),
           FrontierPoint("c", 0.8, 2.0, 1.0, 1.0)]
    rows = {r["label"]: r for r in frontier_check(pts)}
    assert all(r["holds"] for r in rows.values())
    assert rows["b"]["l_min"] == 0.0 and rows["b"]["eps_model"] == 1.0
    assert rows["c"]["eps_res"] == 1.0
