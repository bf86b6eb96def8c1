"""Turn-level simulation of a sender talking through an admission class.

A lane walks a catalog for a number of turns.  Each turn draws a hidden
value, derives the public randomness from the current transcript head,
lets the sender (honest or colluding) pick a latent, renders and seals the
envelope, passes it through the class's processing and admission, and
records the features of whatever was admitted.

The colluding sender only picks from options it expects the class to admit
(its "view"), and only uses syntactic side channels the class leaves open.
A rejected candidate falls back to the honest envelope for the same turn so
the transcript never stalls.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .canonical import digest
from .catalog import Catalog, Rendered, TaskInstance, encode_colluding, encode_honest, score_utility, DEFAULT_WEIGHTS
from .envelope import Envelope, TimingFields
from .catalog import scheduled_bucket
from .randomness import SeedContext, derive_randomness
from .verifier import (
    ALL_CLAUSES,
    LatentProfile,
    ProofSettings,
    ReasonCode,
    Verifier,
    admit_full,
    build_envelope,
    seal,
)

R = ReasonCode
DEFAULT_RECEIPT_KEY = digest(b"clbc-desk-receipt-key").value
DEFAULT_EPOCH = "epoch-0"


@dataclass(frozen=True)
class BaselineClass:
    class_id: str
    enabled_clauses: frozenset
    admit_semantics: str                      # "admit_all_log" or "gate"
    sanitize: bool = False                    # canonical re-encode before admission
    jitter: float = 0.0                       # paraphrase: chance of re-picking a same-intent option
    latent_profile: LatentProfile = LatentProfile.PERMISSIVE
    sender_view: str = "all"                  # all | argmax | honest
    open_channels: Mapping[str, int] = field(default_factory=dict)
    proofs: bool = False

    def to_value(self) -> dict:
        return {
            "class_id": self.class_id,
            "enabled_clauses": sorted(c.value for c in self.enabled_clauses),
            "admit_semantics": self.admit_semantics,
        }


_KEY_ORDER = {"token": 2}

BASELINE_CLASSES: dict[str, BaselineClass] = {
    "raw": BaselineClass("raw", frozenset(), "admit_all_log", open_channels=_KEY_ORDER),
    "audit_only": BaselineClass("audit_only", ALL_CLAUSES, "admit_all_log",
                                latent_profile=LatentProfile.HONEST_ENFORCING, open_channels=_KEY_ORDER, proofs=True),
    "sanitize": BaselineClass("sanitize", frozenset({R.CANONICALIZATION}), "admit_all_log", sanitize=True),
    "paraphrase": BaselineClass("paraphrase", frozenset({R.CANONICALIZATION}), "admit_all_log", sanitize=True,
                                jitter=0.25),
    "overseer": BaselineClass("overseer", frozenset({R.SCHEMA, R.POLICY, R.LATENT}), "gate", sanitize=True,
                              latent_profile=LatentProfile.CONTRACT, sender_view="argmax"),
    "schema_only": BaselineClass("schema_only", frozenset({R.SCHEMA, R.LATENT, R.CANONICALIZATION}), "gate",
                                 latent_profile=LatentProfile.CONTRACT, sender_view="argmax"),
    "clbc_full": BaselineClass("clbc_full", ALL_CLAUSES, "gate", latent_profile=LatentProfile.HONEST_ENFORCING,
                               sender_view="honest", proofs=True),
}
LADDER = tuple(BASELINE_CLASSES)

# Full predicate with the permissive latent profile: every in-set option is
# admissible.  Used for capacity measurements, not part of the ladder.
PERMISSIVE = BaselineClass("permissive", ALL_CLAUSES, "gate", latent_profile=LatentProfile.PERMISSIVE, proofs=True)


def get_class(cls: BaselineClass | str) -> BaselineClass:
    if isinstance(cls, BaselineClass):
        return cls
    if cls == "permissive":
        return PERMISSIVE
    return BASELINE_CLASSES[cls]


# -- features ------------------------------------------------------------------------------

class FeatureVector(NamedTuple):
    option_index: int
    tool_index: int
    timing_offset: int
    metadata_fp: str


def extract_features(
    envelope: bytes | Envelope,
    tool_ids: Sequence[str],
    seed_context: SeedContext | None = None,
    timing_buckets: int = 4,
) -> FeatureVector:
    """Discrete features of one admitted envelope.

    The timing feature is the bucket's offset from the bucket the public
    schedule assigns to that turn (zero for any sender that does not steer
    timing); without a seed context the raw bucket is used.  The metadata
    fingerprint hashes keys and values in wire order (parsing keeps that
    order), so a key-order side channel is visible to it.
    """
    env = Envelope.from_bytes(envelope) if isinstance(envelope, bytes) else envelope
    fp = digest(repr(list(env.metadata.items())).encode("utf-8")).hex()[:8]
    tool = env.tool_call.tool_id if env.tool_call is not None else None
    tool_index = tool_ids.index(tool) if tool in tool_ids else -1
    offset = env.timing.bucket
    if seed_context is not None:
        rand = derive_randomness(seed_context, env.prev_digest, env.turn_index)
        offset = (env.timing.bucket - scheduled_bucket(rand, timing_buckets)) % timing_buckets
    return FeatureVector(env.latent.option_index, tool_index, offset, fp)


# -- lane --------------------------------------------------------------------------------------

@dataclass(frozen=True)
class TurnRecord:
    turn: int
    task_id: str
    s: int
    features: FeatureVector
    option_index: int
    utility: float
    exact_success: bool
    submitted_reason: str
    fallback: bool
    message: str
    admitted_bytes: bytes
    latent_bytes: bytes


@dataclass
class LaneResult:
    class_id: str
    seed: int
    records: list[TurnRecord]
    verifier: Verifier
    audit_reasons: Counter

    def samples(self) -> list[tuple[tuple[FeatureVector, ...], int]]:
        return [((r.features,), r.s) for r in self.records]

    def mean_utility(self) -> float:
        return float(np.mean([r.utility for r in self.records])) if self.records else 0.0

    def exact_success_rate(self) -> float:
        return float(np.mean([r.exact_success for r in self.records])) if self.records else 0.0

    def unique_response_ratio(self) -> float:
        return len({r.message for r in self.records}) / len(self.records) if self.records else 0.0

    def rejection_counts(self) -> dict[str, int]:
        return dict(Counter(r.submitted_reason for r in self.records))


def seed_context_for(catalog: Catalog, seed: int) -> SeedContext:
    return SeedContext.from_label(f"{catalog.catalog_id}/seed-{seed}", epoch_id=DEFAULT_EPOCH)


def _view(cls: BaselineClass, task: TaskInstance, honest_index: int) -> Sequence[int] | None:
    if cls.sender_view == "argmax":
        return task.argmax_indices
    if cls.sender_view == "honest":
        return (honest_index,)
    return None


def run_lane(
    catalog: Catalog,
    cls: BaselineClass | str,
    seed: int,
    turns: int,
    strategy=None,
    hidden: int | Sequence[int] | None = None,
    channels: Mapping[str, int] | None = None,
    proof_settings: ProofSettings | None = None,
    receipt_key: bytes = DEFAULT_RECEIPT_KEY,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> LaneResult:
    """Simulate ``turns`` turns of one sender through one admission class.

    ``hidden`` fixes the hidden value for every turn (an int) or gives one
    per turn; by default each turn draws an independent uniform value in
    ``[0, K)``.  ``channels`` overrides which syntactic side channels a
    colluder uses (``token``: metadata key order, ``time``: timing bucket),
    mapping each to its alphabet size.
    """
    cls = get_class(cls)
    policy = catalog.policy
    tasks = catalog.tasks
    order_rng = np.random.default_rng([seed, 0])
    order = order_rng.permutation(len(tasks))
    if hidden is None:
        s_seq = np.random.default_rng([seed, 1]).integers(catalog.K, size=turns)
    elif isinstance(hidden, (int, np.integer)):
        s_seq = [int(hidden)] * turns
    else:
        s_seq = list(hidden)
        if len(s_seq) < turns:
            raise ValueError("need one hidden value per turn")
    jitter_rng = np.random.default_rng([seed, 2])
    channels = dict(cls.open_channels if channels is None else channels)
    settings = (proof_settings or ProofSettings()) if cls.proofs else None
    key = receipt_key if cls.proofs else None
    verifier = Verifier(
        policy,
        seed_context_for(catalog, seed),
        proof_settings=settings or ProofSettings(),
        tasks=catalog.registry,
        receipt_keys={DEFAULT_EPOCH: receipt_key},
        latent_profile=cls.latent_profile,
        clauses=cls.enabled_clauses if cls.admit_semantics == "gate" else (),
    )
    tool_ids = sorted(policy.tool_schemas)
    audit_reasons: Counter = Counter()
    records: list[TurnRecord] = []

    for t in range(turns):
        task = tasks[int(order[t % len(tasks)])]
        s = int(s_seq[t])
        rand = verifier.next_randomness()
        honest = encode_honest(task, rand)
        if strategy is None:
            latent = honest
        else:
            latent = encode_colluding(task, rand, s, strategy, _view(cls, task, honest.option_index))
        env = build_envelope(task, latent, rand, policy)
        metadata_order = None
        if strategy is not None:
            if "time" in channels:
                bucket = strategy.transform(s, rand, min(channels["time"], policy.timing_buckets))
                env = env.replace(timing=TimingFields(bucket, env.timing.window))
            if "token" in channels and strategy.transform(s, rand, 2) == 1:
                metadata_order = sorted(env.metadata, reverse=True)
        env = seal(env, rand, settings, key, DEFAULT_EPOCH)
        candidate = env.wire_bytes(metadata_order) if metadata_order else env.to_bytes()

        roll = jitter_rng.random()
        pick = jitter_rng.random()
        if cls.sanitize:
            env = Envelope.from_bytes(candidate)
            if roll < cls.jitter:
                alternatives = [o for o in task.options if o.intent_id == env.latent.intent_id and o != env.latent]
                if alternatives:
                    swapped = alternatives[int(pick * len(alternatives))]
                    env = seal(build_envelope(task, swapped, rand, policy), rand, settings, key, DEFAULT_EPOCH)
            candidate = env.to_bytes()

        if cls.class_id == "audit_only":
            audit_reasons[admit_full(candidate, verifier.context(), policy).reason.value] += 1

        verdict = verifier.submit(candidate)
        fallback = False
        if not verdict.accepted:
            fallback = True
            honest_env = seal(build_envelope(task, honest, rand, policy), rand, settings, key, DEFAULT_EPOCH)
            if not verifier.submit(honest_env.to_bytes()).accepted:
                raise RuntimeError(f"honest fallback rejected at turn {t} in class {cls.class_id}")

        record = verifier.state.admitted_log[-1]
        admitted = record.parsed()
        chosen = admitted.latent
        rendered = Rendered(admitted.message, dict(admitted.metadata), admitted.tool_call,
                            admitted.env_actions, admitted.timing)
        records.append(TurnRecord(
            turn=t,
            task_id=task.task_id,
            s=s,
            features=extract_features(admitted, tool_ids, verifier.seed_context, policy.timing_buckets),
            option_index=chosen.option_index,
            utility=score_utility(task, chosen, weights, policy, rendered),
            exact_success=chosen in task.options and chosen.option_index in task.argmax_indices,
            submitted_reason=verdict.reason.value,
            fallback=fallback,
            message=admitted.message,
            admitted_bytes=record.envelope_bytes,
            latent_bytes=chosen.canonical().bytes,
        ))
    return LaneResult(cls.class_id, seed, records, verifier, audit_reasons)
