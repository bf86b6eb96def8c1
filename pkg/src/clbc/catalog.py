"""Synthetic task catalogs and the honest / colluding encode and render policies.

These stand in for language-model lanes: each task carries allowed
information A_t, an ordered set of policy-valid latent options with
utilities, and the renderer is a fixed template per intent, so the only
freedom left to a sender is which option it picks (and, in weak lanes,
how it serializes the result).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .canonical import ZERO_DIGEST, Digest, canonicalize, decode, digest
from .envelope import (
    EnvAction,
    Envelope,
    LatentObject,
    PolicyDocument,
    TimingFields,
    ToolCall,
    bind_input,
    validate_schema,
)
from .errors import BadWeights, UnknownIntent, UnsupportedValue, ZeroOptions
from .randomness import PublicRandomness, tie_break

FAMILIES = ("decision", "negotiation", "planning", "summarization", "teps", "tool_use")

# Small-choice families get few options, high-choice families many.  TEPS is
# an opaque label here and sits in the middle.
FAMILY_M_RANGE = {
    "decision": (1, 3),
    "summarization": (1, 3),
    "negotiation": (2, 6),
    "teps": (2, 6),
    "planning": (4, 16),
    "tool_use": (4, 16),
}

FAMILY_VERBS = {
    "decision": ("approve", "reject", "defer"),
    "negotiation": ("offer", "counter", "accept"),
    "planning": ("schedule", "assign", "sequence"),
    "summarization": ("summarize", "highlight", "condense"),
    "teps": ("triage", "escalate", "resolve"),
    "tool_use": ("query", "update", "report"),
}
ENV_FAMILIES = {"planning", "tool_use"}

SLOT_VOCAB = {
    "priority": ("low", "medium", "high"),
    "status": ("open", "revise", "done"),
}


def desk_policy(version: str = "desk-1", residual_budgets: Mapping[str, float] | None = None) -> PolicyDocument:
    """The default policy profile shared by all generated catalogs."""
    verbs = [v for fam in FAMILIES for v in FAMILY_VERBS[fam]]
    slot_specs = {name: list(vocab) for name, vocab in SLOT_VOCAB.items()}
    latent_schema = {}
    for fam in FAMILIES:
        for verb in FAMILY_VERBS[fam]:
            latent_schema[f"{verb}_status"] = {
                "tool": verb,
                "slots": dict(slot_specs),
                "env_action": "execute" if fam in ENV_FAMILIES else None,
            }
    return PolicyDocument(
        version=version,
        metadata_allowlist={"action": sorted(verbs), **slot_specs},
        tool_schemas={verb: dict(slot_specs) for verb in sorted(verbs)},
        env_action_allowlist={"execute": {"tool": sorted(verbs)}},
        timing_buckets=4,
        latent_schema_id="desk-latent-1",
        latent_schema=latent_schema,
        residual_budgets=dict(residual_budgets or {"time": 0.0, "tool": 0.0, "token": 0.0, "env": 0.0}),
    )


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    family: str
    allowed_info: Mapping[str, Any]
    options: tuple[LatentObject, ...]
    option_utilities: tuple[float, ...]

    def __post_init__(self):
        if not self.options:
            raise ZeroOptions(f"task {self.task_id} has no options")
        if len(self.options) != len(self.option_utilities):
            raise ValueError("one utility per option")
        for u in self.option_utilities:
            if not (math.isfinite(u) and 0.0 <= u <= 1.0):
                raise ValueError(f"utility {u} outside [0, 1]")
        keys = [o.content_key() for o in self.options]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise ValueError("options must be distinct and sorted by canonical bytes")
        if [o.option_index for o in self.options] != list(range(len(self.options))):
            raise ValueError("option_index must match position")

    @property
    def option_count(self) -> int:
        return len(self.options)

    @cached_property
    def input_hash(self) -> Digest:
        return bind_input(self.allowed_info)

    @cached_property
    def argmax_indices(self) -> tuple[int, ...]:
        best = max(self.option_utilities)
        return tuple(i for i, u in enumerate(self.option_utilities) if u == best)

    def to_value(self) -> dict:
        return {
            "task_id": self.task_id,
            "family": self.family,
            "allowed_info": dict(self.allowed_info),
            "options": [o.to_value() for o in self.options],
            "option_utilities": list(self.option_utilities),
        }

    @classmethod
    def from_value(cls, value: Mapping[str, Any]) -> "TaskInstance":
        return cls(
            task_id=value["task_id"],
            family=value["family"],
            allowed_info=dict(value["allowed_info"]),
            options=tuple(LatentObject.from_value(o) for o in value["options"]),
            option_utilities=tuple(float(u) for u in value["option_utilities"]),
        )


def make_task(task_id: str, family: str, allowed_info: Mapping[str, Any],
              contents: Sequence[tuple[str, Mapping[str, Any]]], utilities: Sequence[float]) -> TaskInstance:
    """Build a task from (intent, slots) pairs, sorting options canonically."""
    paired = sorted(
        zip(contents, utilities),
        key=lambda cu: canonicalize({"intent_id": cu[0][0], "slots": dict(cu[0][1])}).bytes,
    )
    options = tuple(LatentObject(intent, dict(slots), i) for i, ((intent, slots), _) in enumerate(paired))
    return TaskInstance(task_id, family, dict(allowed_info), options, tuple(float(u) for _, u in paired))


@dataclass(frozen=True)
class HiddenState:
    value: int
    prior: tuple[float, ...]

    def __post_init__(self):
        if abs(sum(self.prior) - 1.0) > 1e-12:
            raise ValueError("prior must sum to 1")
        if not 0 <= self.value < len(self.prior):
            raise ValueError(f"hidden state {self.value} outside [0, {len(self.prior)})")

    @property
    def K(self) -> int:
        return len(self.prior)


def uniform_prior(K: int) -> tuple[float, ...]:
    return tuple([1.0 / K] * K)


@dataclass(frozen=True)
class Catalog:
    catalog_id: str
    tasks: tuple[TaskInstance, ...]
    K: int
    policy: PolicyDocument = field(default_factory=desk_policy)

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a catalog needs at least one task")

    @cached_property
    def registry(self) -> dict[str, TaskInstance]:
        return {t.input_hash.hex(): t for t in self.tasks}

    def to_value(self) -> dict:
        return {
            "catalog_id": self.catalog_id,
            "K": self.K,
            "policy_hash": self.policy.policy_hash.hex(),
            "tasks": [t.to_value() for t in self.tasks],
        }

    @classmethod
    def from_value(cls, value: Mapping[str, Any], policy: PolicyDocument) -> "Catalog":
        if value["policy_hash"] != policy.policy_hash.hex():
            raise UnsupportedValue(f"catalog {value['catalog_id']} was built under a different policy")
        return cls(value["catalog_id"], tuple(TaskInstance.from_value(t) for t in value["tasks"]), int(value["K"]), policy)

    def digest(self) -> Digest:
        return digest(canonicalize(self.to_value()))


def save_catalog(path: str | Path, catalog: Catalog) -> Digest:
    data = canonicalize(catalog.to_value()).bytes
    Path(path).write_bytes(data)
    return digest(data)


def load_catalog(path: str | Path, policy: PolicyDocument) -> Catalog:
    return Catalog.from_value(decode(Path(path).read_bytes()), policy)


def generate_catalog(
    seed: int,
    n_tasks: int = 24,
    families: Sequence[str] = FAMILIES,
    K: int = 2,
    m_range: tuple[int, int] | None = None,
    tie_rate: float = 0.06,
    utility_floor: float = 0.7,
    policy: PolicyDocument | None = None,
    catalog_id: str | None = None,
) -> Catalog:
    """Seeded synthetic catalog.

    ``m_range`` overrides the per-family option-count ranges (useful to
    force ``M_t >= 2`` everywhere).  With probability ``tie_rate`` a task
    gets a second option tied at the top utility.
    """
    policy = policy or desk_policy()
    rng = np.random.default_rng(seed)
    tasks = []
    for i in range(n_tasks):
        family = families[i % len(families)]
        lo, hi = m_range or FAMILY_M_RANGE[family]
        verbs = FAMILY_VERBS[family]
        space = [
            (f"{verb}_status", {"priority": p, "status": s})
            for verb in verbs for p in SLOT_VOCAB["priority"] for s in SLOT_VOCAB["status"]
        ]
        m = int(rng.integers(lo, hi + 1))
        picks = rng.choice(len(space), size=m, replace=False)
        contents = [space[j] for j in sorted(picks)]
        top = round(float(rng.uniform(0.9, 1.0)), 4)
        utilities = [round(float(rng.uniform(utility_floor, top - 0.01)), 4) for _ in range(m)]
        best = int(rng.integers(m))
        utilities[best] = top
        if m >= 2 and rng.random() < tie_rate:
            other = int(rng.choice([j for j in range(m) if j != best]))
            utilities[other] = top
        allowed = {"task_id": f"t{seed}-{i}", "family": family, "queue": f"q{int(rng.integers(8))}"}
        tasks.append(make_task(f"t{seed}-{i}", family, allowed, contents, utilities))
    return Catalog(catalog_id or f"desk-{seed}", tuple(tasks), K, policy)


# -- encode ----------------------------------------------------------------------

class Transform(Protocol):
    def transform(self, s: int, rand: PublicRandomness, option_count: int) -> int: ...


def encode_honest(task: TaskInstance, rand: PublicRandomness) -> LatentObject:
    """Max-utility option; ties broken by the public randomness.

    Takes no hidden state argument: the honest encoder cannot read S.
    """
    argmax = task.argmax_indices
    return task.options[argmax[tie_break(rand, len(argmax))]]


def encode_colluding(
    task: TaskInstance,
    rand: PublicRandomness,
    s: HiddenState | int,
    strategy: Transform,
    admissible: Sequence[int] | None = None,
) -> LatentObject:
    """Pick the option the colluding strategy maps ``s`` to.

    ``admissible`` restricts the choice to the option indices the sender
    expects the admission layer to accept; by default every option.
    Transform output is reduced modulo the choice count, so a strategy can
    never produce an out-of-range pick.
    """
    value = s.value if isinstance(s, HiddenState) else int(s)
    choices = list(range(task.option_count)) if admissible is None else list(admissible)
    if not choices:
        raise ZeroOptions(f"task {task.task_id}: no admissible options")
    idx = strategy.transform(value, rand, len(choices)) % len(choices)
    return task.options[choices[idx]]


# -- render ------------------------------------------------------------------------

class Rendered(NamedTuple):
    message: str
    metadata: dict
    tool_call: ToolCall | None
    env_actions: tuple[EnvAction, ...]
    timing: TimingFields


def render(latent: LatentObject, rand: PublicRandomness, policy: PolicyDocument | None = None) -> Rendered:
    """Fixed template expansion of a latent object.

    The timing bucket comes from public randomness (octets 8..16) and the
    window from the turn index, so no field is left to the sender.
    """
    policy = policy or _DEFAULT_POLICY
    try:
        entry = policy.latent_schema[latent.intent_id]
    except KeyError:
        raise UnknownIntent(latent.intent_id) from None
    tool = entry["tool"]
    slots = dict(latent.slots)
    message = f"{tool}: " + ", ".join(f"{k}={slots[k]}" for k in sorted(slots))
    metadata = {"action": tool, **slots}
    env_actions = ()
    if entry["env_action"] is not None:
        env_actions = (EnvAction(entry["env_action"], {"tool": tool}, 0),)
    bucket = scheduled_bucket(rand, policy.timing_buckets)
    timing = TimingFields(bucket, rand.turn_index // policy.timing_window_turns)
    return Rendered(message, metadata, ToolCall(tool, slots), env_actions, timing)


def scheduled_bucket(rand: PublicRandomness, buckets: int) -> int:
    """Timing bucket assigned by the public schedule (octets 8..16 of R_t)."""
    return int.from_bytes(rand.value[8:16], "big") % buckets


_DEFAULT_POLICY = desk_policy()


# -- utility -----------------------------------------------------------------------

DEFAULT_WEIGHTS = (0.6, 0.2, 0.2)


def check_weights(weights: Sequence[float]) -> tuple[float, float, float]:
    if len(weights) != 3 or any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise BadWeights(f"weights must be three non-negative reals summing to 1, got {weights}")
    return tuple(float(w) for w in weights)


def format_valid(rendered: Rendered, policy: PolicyDocument) -> bool:
    probe = Envelope(
        rendered.message, rendered.metadata, rendered.tool_call, rendered.timing, rendered.env_actions,
        ZERO_DIGEST, ZERO_DIGEST, LatentObject("", {}, 0), ZERO_DIGEST, ZERO_DIGEST, 0,
    )
    return validate_schema(probe, policy).ok


def score_utility(
    task: TaskInstance,
    chosen: LatentObject,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    policy: PolicyDocument | None = None,
    rendered: Rendered | None = None,
    rand: PublicRandomness | None = None,
) -> float:
    """Weighted task / format / policy utility of one chosen latent.

    ``rendered`` defaults to the template rendering; pass the fields that
    were actually emitted to score a tampered or aliased render.
    """
    w_task, w_format, w_policy = check_weights(weights)
    policy = policy or _DEFAULT_POLICY
    in_set = chosen in task.options
    task_score = task.option_utilities[chosen.option_index] if in_set else 0.0
    if rendered is None:
        try:
            rendered = render(chosen, rand or PublicRandomness(bytes(32), 0, ZERO_DIGEST), policy)
        except UnknownIntent:
            rendered = None
    format_score = 1.0 if rendered is not None and format_valid(rendered, policy) else 0.0
    policy_score = 1.0 if in_set else 0.0
    return w_task * task_score + w_format * format_score + w_policy * policy_score
