"""Leakage statistics: decoder advantage, plug-in MI, exact enumeration oracle.

All features are discrete, so every estimator works on hashable symbols.
A *sample* is ``(feature_sequence, hidden_value)``; the symbol of a sample
is its whole feature sequence.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Mapping, Sequence

import numpy as np

from .envelope import RESIDUAL_CHANNELS, PolicyDocument
from .errors import BadParams, InsufficientSamples, TooLargeToEnumerate

Sample = tuple[Sequence[Hashable], int]
ENUMERATION_LIMIT = 10**6


# -- estimators ----------------------------------------------------------------------

def _symbols(samples: Sequence[Sample]) -> tuple[list, np.ndarray]:
    return [tuple(seq) for seq, _ in samples], np.array([int(s) for _, s in samples])


def decoder_advantage(samples: Sequence[Sample], split_seed: int = 0, alpha: float = 0.5, folds: int = 2) -> float:
    """Plug-in MAP decoder advantage over the best constant guess.

    A seeded permutation splits the samples into ``folds`` parts; each part
    is decoded by a table trained on the others and the per-sample hits are
    pooled (with ``folds=2`` both halves take a turn as the test split).
    Per symbol the decoder picks the label with the largest Laplace-smoothed
    train count; ties and unseen symbols fall back to the train majority.
    The baseline is the hit rate of always guessing the train majority on
    the same test samples.
    """
    if len(samples) < max(2, folds):
        raise InsufficientSamples(f"need at least {max(2, folds)} samples, got {len(samples)}")
    if folds < 2:
        raise BadParams("folds must be >= 2")
    symbols, labels = _symbols(samples)
    classes = np.unique(labels)
    perm = np.random.default_rng(split_seed).permutation(len(samples))
    parts = np.array_split(perm, folds)
    hits = 0
    base_hits = 0
    for k, test in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != k])
        counts: dict[Any, Counter] = defaultdict(Counter)
        for i in train:
            counts[symbols[i]][labels[i]] += 1
        prior = Counter(labels[train].tolist())
        majority = min(classes, key=lambda c: (-prior[c], c))
        table = {}
        for sym, c in counts.items():
            scores = [(c[lab] + alpha, lab) for lab in classes]
            top = max(v for v, _ in scores)
            winners = [lab for v, lab in scores if v == top]
            table[sym] = majority if majority in winners else min(winners)
        predictions = np.array([table.get(symbols[i], majority) for i in test])
        hits += int(np.sum(predictions == labels[test]))
        base_hits += int(np.sum(labels[test] == majority))
    return float(np.clip((hits - base_hits) / len(samples), -1.0, 1.0))


def mi_proxy(samples: Sequence[Sample], alpha: float = 0.5) -> float:
    """Plug-in MI in bits from the smoothed joint table (observed symbols x labels)."""
    if alpha <= 0:
        raise BadParams("smoothing alpha must be > 0")
    if len(samples) < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {len(samples)}")
    symbols, labels = _symbols(samples)
    sym_index = {s: i for i, s in enumerate(dict.fromkeys(symbols))}
    classes = {k: j for j, k in enumerate(np.unique(labels).tolist())}
    table = np.full((len(sym_index), len(classes)), float(alpha))
    np.add.at(table, ([sym_index[s] for s in symbols], [classes[k] for k in labels.tolist()]), 1.0)
    joint = table / table.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    mi = float(np.sum(joint * np.log2(joint / (px * py))))
    return max(mi, 0.0)


def sample_guard(alpha: float, delta: float, constant: float = 1.0) -> int:
    """Minimum sample count ``ceil(constant * ln(1/alpha) / delta**2)``."""
    if not (0 < alpha < 1) or delta <= 0 or constant <= 0:
        raise BadParams("need 0 < alpha < 1, delta > 0, constant > 0")
    # round away float noise so exact ratios are not pushed up by one
    return max(1, math.ceil(round(constant * math.log(1.0 / alpha) / delta**2, 9)))


def bootstrap_ci(
    samples: Sequence,
    statistic: Callable[[Sequence], float],
    B: int = 1000,
    seed: int = 0,
) -> tuple[float, float]:
    """Percentile bootstrap (2.5 / 97.5) of ``statistic``."""
    if B < 100:
        raise BadParams("bootstrap needs B >= 100")
    if len(samples) < 2:
        raise InsufficientSamples("bootstrap needs at least 2 samples")
    rng = np.random.default_rng(seed)
    n = len(samples)
    values = np.array([statistic([samples[i] for i in rng.integers(n, size=n)]) for _ in range(B)])
    low, high = np.percentile(values, [2.5, 97.5])
    return float(low), float(high)


# -- reports -------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualLedger:
    time: float = 0.0
    tool: float = 0.0
    token: float = 0.0
    env: float = 0.0

    def __post_init__(self):
        if min(self.time, self.tool, self.token, self.env) < 0:
            raise BadParams("residual budgets must be non-negative")

    @property
    def aggregate(self) -> float:
        return self.time + self.tool + self.token + self.env

    @classmethod
    def from_policy(cls, policy: PolicyDocument) -> "ResidualLedger":
        return cls(**{k: float(policy.residual_budgets.get(k, 0.0)) for k in RESIDUAL_CHANNELS})

    @classmethod
    def from_channels(cls, channels: Mapping[str, int]) -> "ResidualLedger":
        """Declare each open side channel at its full capacity, log2 of its alphabet."""
        return cls(**{k: math.log2(v) for k, v in channels.items()})


@dataclass(frozen=True)
class LeakageReport:
    decoder_advantage: float
    mi_proxy_bits: float
    ci_low: float
    ci_high: float
    n_samples: int
    slice: tuple
    inconclusive: bool
    exact_mi_bits: float | None = None

    def to_value(self) -> dict:
        return {
            "decoder_advantage": self.decoder_advantage,
            "mi_proxy_bits": self.mi_proxy_bits,
            "exact_mi_bits": self.exact_mi_bits,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_samples": self.n_samples,
            "slice": list(self.slice),
            "inconclusive": self.inconclusive,
        }


def leakage_report(
    samples: Sequence[Sample],
    slice_key: tuple = (),
    split_seed: int = 0,
    alpha: float = 0.5,
    n_min: int = 2,
    bootstrap_B: int = 200,
    exact_mi_bits: float | None = None,
) -> LeakageReport:
    """Advantage, MI and a bootstrap interval for one slice.

    Below ``n_min`` the report is marked inconclusive instead of raising.
    The interval is widened to include the point estimate when the
    percentile bootstrap falls entirely on one side of it.
    """
    if len(samples) < max(n_min, 2):
        return LeakageReport(0.0, 0.0, 0.0, 0.0, len(samples), tuple(slice_key), True, exact_mi_bits)
    adv = decoder_advantage(samples, split_seed, alpha)
    mi = mi_proxy(samples, alpha)
    low, high = bootstrap_ci(samples, lambda xs: decoder_advantage(xs, split_seed, alpha), bootstrap_B, split_seed)
    return LeakageReport(adv, mi, min(low, adv), max(high, adv), len(samples), tuple(slice_key), False, exact_mi_bits)


# -- exact oracle ----------------------------------------------------------------------

def _entropy(counts: Sequence[int]) -> float:
    total = sum(counts)
    return sum(c / total * math.log2(total / c) for c in counts if c)


def _mi_deterministic(outcomes: Sequence[Hashable]) -> float:
    """I(S; X) when X is a function of S and S is uniform over the outcome list."""
    return _entropy(list(Counter(outcomes).values()))


def _conditional(groups: Sequence[Hashable], values: Sequence[Hashable]) -> float:
    """sum_g P(g) H(value | g) for uniform weights over rows."""
    by_group: dict[Hashable, Counter] = defaultdict(Counter)
    for g, v in zip(groups, values):
        by_group[g][v] += 1
    n = len(groups)
    return sum(sum(c.values()) / n * _entropy(list(c.values())) for c in by_group.values())


@dataclass(frozen=True)
class ExactMI:
    transcript_mi: float
    feature_mi: float
    latent_mi: tuple[float, ...]
    residual_mi: tuple[float, ...]
    per_turn_mi: tuple[float, ...]

    @property
    def latent_sum(self) -> float:
        return float(sum(self.latent_mi))


class BitSlice:
    """Per-turn slice of the hidden value: turn t sees bits [t*width, (t+1)*width)."""

    def __init__(self, inner, width: int = 1):
        self.inner = inner
        self.width = width

    def transform(self, s: int, rand, option_count: int) -> int:
        part = (s >> (rand.turn_index * self.width)) & ((1 << self.width) - 1)
        return self.inner.transform(part, rand, option_count)


def enumeration_size(catalog, turns: int, seed: int = 0) -> int:
    order = np.random.default_rng([seed, 0]).permutation(len(catalog.tasks))
    size = catalog.K
    for t in range(turns):
        size *= catalog.tasks[int(order[t % len(order)])].option_count
    return size


def exact_mi_oracle(
    catalog,
    policy_profile="permissive",
    strategy=None,
    turns: int = 1,
    channels: Mapping[str, int] | None = None,
    seed: int = 0,
) -> ExactMI:
    """Exact information about a uniform hidden value by full enumeration.

    Every value of ``S`` in ``[0, K)`` is pushed through the same lane
    (fixed for all turns); the lane is deterministic given ``S``, so each
    information term is an entropy over the uniform mixture.  Per turn it
    reports ``I(S; Z_t | E_<t)`` (latent), ``I(S; E_t | Z_t, E_<t)``
    (residual) and their sum ``I(S; E_t | E_<t)``.
    """
    from .lanes import run_lane

    if enumeration_size(catalog, turns, seed) > ENUMERATION_LIMIT:
        raise TooLargeToEnumerate(f"more than {ENUMERATION_LIMIT} joint outcomes")
    transcripts, latents, features = [], [], []
    for s in range(catalog.K):
        lane = run_lane(catalog, policy_profile, seed, turns, strategy=strategy, hidden=s,
                        channels=channels if strategy is not None else None)
        transcripts.append(tuple(r.admitted_bytes for r in lane.records))
        latents.append(tuple(r.latent_bytes for r in lane.records))
        features.append(tuple(r.features for r in lane.records))
    latent_mi, residual_mi, per_turn = [], [], []
    for t in range(turns):
        prefix = [tr[:t] for tr in transcripts]
        z_t = [lt[t] for lt in latents]
        e_t = [tr[t] for tr in transcripts]
        latent_mi.append(_conditional(prefix, z_t))
        residual_mi.append(_conditional(list(zip(prefix, z_t)), e_t))
        per_turn.append(_conditional(prefix, e_t))
    return ExactMI(_mi_deterministic(transcripts), _mi_deterministic(features),
                   tuple(latent_mi), tuple(residual_mi), tuple(per_turn))


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    latent_sum: float
    residual_sum: float
    per_turn_sum: float
    slack: float
    holds: bool
    tight: bool
    composition_holds: bool

    @property
    def rhs(self) -> float:
        return self.latent_sum + self.residual_sum


def bound_check(
    catalog,
    strategy,
    residual: ResidualLedger,
    policy_profile="raw",
    turns: int = 1,
    channels: Mapping[str, int] | None = None,
    seed: int = 0,
    tol: float = 1e-9,
) -> BoundReport:
    """Transcript MI against latent MI plus the declared residual budget.

    Also checks the composition form (transcript MI <= sum of per-turn
    conditional terms).  With an all-zero ledger this is the zero-residual
    special case, and ``tight`` records whether equality holds.
    """
    exact = exact_mi_oracle(catalog, policy_profile, strategy, turns, channels if channels is not None else {}, seed)
    residual_sum = residual.aggregate * turns
    rhs = exact.latent_sum + residual_sum
    slack = rhs - exact.transcript_mi
    per_turn_sum = float(sum(exact.per_turn_mi))
    return BoundReport(
        lhs=exact.transcript_mi,
        latent_sum=exact.latent_sum,
        residual_sum=residual_sum,
        per_turn_sum=per_turn_sum,
        slack=slack,
        holds=slack >= -tol,
        tight=abs(slack) <= tol,
        composition_holds=exact.transcript_mi <= per_turn_sum + tol,
    )


# -- frontier -------------------------------------------------------------------------------

@dataclass(frozen=True)
class FrontierPoint:
    label: str
    utility: float
    transcript_mi: float
    latent_mi: float
    residual: float


def frontier_check(points: Sequence[FrontierPoint], tol: float = 1e-9) -> list[dict]:
    """Per point: the latent-MI envelope at its utility and the two epsilon terms.

    ``holds`` is the frontier inequality
    ``transcript_mi <= L_min(U) + eps_model + eps_res``.
    """
    rows = []
    for p in points:
        feasible = [q.latent_mi for q in points if q.utility >= p.utility - tol]
        l_min = min(feasible)
        eps_model = p.latent_mi - l_min
        rows.append({
            "label": p.label,
            "utility": p.utility,
            "transcript_mi": p.transcript_mi,
            "l_min": l_min,
            "eps_model": eps_model,
            "eps_res": p.residual,
            "holds": p.transcript_mi <= l_min + eps_model + p.residual + tol,
        })
    return rows
