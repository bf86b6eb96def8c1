"""The per-turn envelope, its schema, and the policy document it is checked against."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from functools import cached_property
from pathlib import Path
from typing import AbstractSet, TYPE_CHECKING, Any, Mapping

from .canonical import (
    CanonicalBytes,
    Digest,
    canonicalize,
    decode,
    digest,
    digest_value,
)
from .errors import PolicyError, UnsupportedValue

if TYPE_CHECKING:
    from .catalog import TaskInstance
    from .randomness import SeedContext
    from .verifier import LatentProfile, ProofSettings

Scalar = str | int | bool | Decimal
RESIDUAL_CHANNELS = ("time", "tool", "token", "env")


class EnvelopeFormatError(UnsupportedValue):
    """Decoded bytes do not have the envelope structure."""

    def __init__(self, path: str, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path
        self.detail = detail


def _memo(obj: Any, name: str, compute):
    # frozen instances are treated as immutable values, so derived bytes are cached
    cached = obj.__dict__.get(name)
    if cached is None:
        cached = compute()
        object.__setattr__(obj, name, cached)
    return cached


@dataclass(frozen=True)
class LatentObject:
    intent_id: str
    slots: Mapping[str, Scalar]
    option_index: int

    def to_value(self) -> dict:
        return {"intent_id": self.intent_id, "slots": dict(self.slots), "option_index": self.option_index}

    @classmethod
    def from_value(cls, value: Any) -> "LatentObject":
        _expect(value, dict, "latent")
        _expect_keys(value, {"intent_id", "slots", "option_index"}, "latent")
        _expect(value["intent_id"], str, "latent.intent_id")
        _expect(value["slots"], dict, "latent.slots")
        _expect_int(value["option_index"], "latent.option_index")
        return cls(value["intent_id"], dict(value["slots"]), value["option_index"])

    def canonical(self) -> CanonicalBytes:
        return _memo(self, "_canonical", lambda: canonicalize(self.to_value()))

    def content_key(self) -> bytes:
        """Canonical bytes of the semantic content, ignoring the option index."""
        return canonicalize({"intent_id": self.intent_id, "slots": dict(self.slots)}).bytes

    def __hash__(self):
        return hash(self.canonical().bytes)

    def __eq__(self, other):
        if not isinstance(other, LatentObject):
            return NotImplemented
        return self.canonical().bytes == other.canonical().bytes


@dataclass(frozen=True)
class ToolCall:
    tool_id: str
    args: Mapping[str, Scalar]
    arg_order_canonical: bool = True

    def to_value(self) -> dict:
        return {"tool_id": self.tool_id, "args": dict(self.args), "arg_order_canonical": self.arg_order_canonical}

    @classmethod
    def from_value(cls, value: Any) -> "ToolCall":
        _expect(value, dict, "tool_call")
        _expect_keys(value, {"tool_id", "args", "arg_order_canonical"}, "tool_call")
        _expect(value["tool_id"], str, "tool_call.tool_id")
        _expect(value["args"], dict, "tool_call.args")
        _expect(value["arg_order_canonical"], bool, "tool_call.arg_order_canonical")
        return cls(value["tool_id"], dict(value["args"]), value["arg_order_canonical"])


@dataclass(frozen=True)
class TimingFields:
    bucket: int
    window: int

    def to_value(self) -> dict:
        return {"bucket": self.bucket, "window": self.window}

    @classmethod
    def from_value(cls, value: Any) -> "TimingFields":
        _expect(value, dict, "timing")
        _expect_keys(value, {"bucket", "window"}, "timing")
        _expect_int(value["bucket"], "timing.bucket")
        _expect_int(value["window"], "timing.window")
        return cls(value["bucket"], value["window"])


@dataclass(frozen=True)
class EnvAction:
    action_id: str
    params: Mapping[str, Scalar]
    order_index: int

    def to_value(self) -> dict:
        return {"action_id": self.action_id, "params": dict(self.params), "order_index": self.order_index}

    @classmethod
    def from_value(cls, value: Any, path: str) -> "EnvAction":
        _expect(value, dict, path)
        _expect_keys(value, {"action_id", "params", "order_index"}, path)
        _expect(value["action_id"], str, f"{path}.action_id")
        _expect(value["params"], dict, f"{path}.params")
        _expect_int(value["order_index"], f"{path}.order_index")
        return cls(value["action_id"], dict(value["params"]), value["order_index"])


@dataclass(frozen=True)
class ProofReceipt:
    mechanism_id: str
    binding: Digest
    key_epoch: str

    def to_value(self) -> dict:
        return {"mechanism_id": self.mechanism_id, "binding": self.binding.hex(), "key_epoch": self.key_epoch}

    @classmethod
    def from_value(cls, value: Any) -> "ProofReceipt":
        _expect(value, dict, "proof")
        _expect_keys(value, {"mechanism_id", "binding", "key_epoch"}, "proof")
        _expect(value["mechanism_id"], str, "proof.mechanism_id")
        _expect(value["key_epoch"], str, "proof.key_epoch")
        return cls(value["mechanism_id"], _digest_field(value["binding"], "proof.binding"), value["key_epoch"])


_ENVELOPE_KEYS = {
    "message", "metadata", "tool_call", "timing", "env_actions", "policy_hash", "input_hash",
    "latent", "randomness_commitment", "prev_digest", "turn_index", "proof",
}


@dataclass(frozen=True)
class Envelope:
    message: str
    metadata: Mapping[str, Scalar]
    tool_call: ToolCall | None
    timing: TimingFields
    env_actions: tuple[EnvAction, ...]
    policy_hash: Digest
    input_hash: Digest
    latent: LatentObject
    randomness_commitment: Digest
    prev_digest: Digest
    turn_index: int
    proof: ProofReceipt | None = None

    def to_value(self, include_proof: bool = True) -> dict:
        value = {
            "message": self.message,
            "metadata": dict(self.metadata),
            "tool_call": None if self.tool_call is None else self.tool_call.to_value(),
            "timing": self.timing.to_value(),
            "env_actions": [a.to_value() for a in self.env_actions],
            "policy_hash": self.policy_hash.hex(),
            "input_hash": self.input_hash.hex(),
            "latent": self.latent.to_value(),
            "randomness_commitment": self.randomness_commitment.hex(),
            "prev_digest": self.prev_digest.hex(),
            "turn_index": self.turn_index,
        }
        if include_proof:
            value["proof"] = None if self.proof is None else self.proof.to_value()
        return value

    def payload(self) -> CanonicalBytes:
        """Canonical bytes of everything except the proof receipt (what the chain binds)."""
        return _memo(self, "_payload", lambda: canonicalize(self.to_value(include_proof=False)))

    def payload_digest(self) -> Digest:
        return _memo(self, "_payload_digest", lambda: digest(self.payload()))

    def to_bytes(self) -> bytes:
        """Wire form: the canonical encoding of the whole envelope."""
        return _memo(self, "_wire", lambda: canonicalize(self.to_value()).bytes)

    def wire_bytes(self, metadata_order: list[str] | None = None) -> bytes:
        """Serialize with metadata keys in a caller-chosen order.

        Only weak-admission lanes ever see this form; it models a producer
        that controls its own serializer.
        """
        if metadata_order is None:
            return self.to_bytes()
        value = self.to_value()
        parts = []
        for key in sorted(value):
            if key == "metadata":
                inner = ",".join(
                    canonicalize(k).text() + ":" + canonicalize(self.metadata[k]).text() for k in metadata_order
                )
                parts.append(f'"metadata":{{{inner}}}')
            else:
                parts.append(canonicalize(key).text() + ":" + canonicalize(value[key]).text())
        return ("{" + ",".join(parts) + "}").encode("utf-8")

    def replace(self, **changes) -> "Envelope":
        from dataclasses import replace

        return replace(self, **changes)

    @classmethod
    def from_value(cls, value: Any) -> "Envelope":
        _expect(value, dict, "envelope")
        _expect_keys(value, _ENVELOPE_KEYS, "envelope")
        _expect(value["message"], str, "message")
        _expect(value["metadata"], dict, "metadata")
        _expect(value["env_actions"], list, "env_actions")
        _expect_int(value["turn_index"], "turn_index")
        return cls(
            message=value["message"],
            metadata=dict(value["metadata"]),
            tool_call=None if value["tool_call"] is None else ToolCall.from_value(value["tool_call"]),
            timing=TimingFields.from_value(value["timing"]),
            env_actions=tuple(
                EnvAction.from_value(a, f"env_actions[{i}]") for i, a in enumerate(value["env_actions"])
            ),
            policy_hash=_digest_field(value["policy_hash"], "policy_hash"),
            input_hash=_digest_field(value["input_hash"], "input_hash"),
            latent=LatentObject.from_value(value["latent"]),
            randomness_commitment=_digest_field(value["randomness_commitment"], "randomness_commitment"),
            prev_digest=_digest_field(value["prev_digest"], "prev_digest"),
            turn_index=value["turn_index"],
            proof=None if value["proof"] is None else ProofReceipt.from_value(value["proof"]),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        try:
            value = decode(data)
        except UnsupportedValue as exc:
            raise EnvelopeFormatError("envelope", str(exc)) from exc
        return cls.from_value(value)


def _expect(value: Any, kind: type, path: str) -> None:
    if kind is int:
        _expect_int(value, path)
    elif not isinstance(value, kind):
        raise EnvelopeFormatError(path, f"expected {kind.__name__}, got {type(value).__name__}")


def _expect_int(value: Any, path: str) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise EnvelopeFormatError(path, f"expected integer, got {type(value).__name__}")


def _expect_keys(value: dict, keys: set[str], path: str) -> None:
    if set(value) != keys:
        extra = sorted(set(value) - keys)
        missing = sorted(keys - set(value))
        raise EnvelopeFormatError(path, f"field set mismatch (extra={extra}, missing={missing})")


def _digest_field(value: Any, path: str) -> Digest:
    if not isinstance(value, str) or len(value) != 64:
        raise EnvelopeFormatError(path, "expected 64 hex characters")
    try:
        return Digest.fromhex(value)
    except ValueError as exc:
        raise EnvelopeFormatError(path, "expected 64 hex characters") from exc


# -- field type specs ---------------------------------------------------------
# A spec is "str", "int", "bool", "decimal:<places>", or a list of allowed values.

def check_type(value: Any, spec: Any) -> str | None:
    """Return a description of the violation, or ``None`` if ``value`` conforms."""
    if isinstance(spec, (list, tuple)):
        if isinstance(value, bool) or value not in list(spec):
            return f"value {value!r} not in allowed set"
        return None
    if spec == "str":
        return None if isinstance(value, str) else "expected string"
    if spec == "bool":
        return None if isinstance(value, bool) else "expected boolean"
    if spec == "int":
        return None if isinstance(value, int) and not isinstance(value, bool) else "expected integer"
    if isinstance(spec, str) and spec.startswith("decimal:"):
        places = int(spec.split(":", 1)[1])
        if isinstance(value, bool) or not isinstance(value, (int, Decimal)):
            return "expected decimal"
        if isinstance(value, Decimal):
            if not value.is_finite():
                return "non-finite decimal"
            # reject (never round) digits beyond the declared precision
            if value.normalize().as_tuple().exponent < -places:
                return f"more than {places} decimal places"
        return None
    return f"unknown type spec {spec!r}"


def _valid_spec(spec: Any) -> bool:
    if isinstance(spec, (list, tuple)):
        return len(spec) > 0
    return spec in ("str", "int", "bool") or (isinstance(spec, str) and spec.startswith("decimal:"))


@dataclass(frozen=True)
class PolicyDocument:
    version: str
    metadata_allowlist: Mapping[str, Any]
    tool_schemas: Mapping[str, Mapping[str, Any]]
    env_action_allowlist: Mapping[str, Mapping[str, Any]]
    timing_buckets: int
    latent_schema_id: str
    latent_schema: Mapping[str, Mapping[str, Any]]
    tie_break_rule_id: str = "first8-be-mod"
    residual_budgets: Mapping[str, float] = field(
        default_factory=lambda: {c: 0.0 for c in RESIDUAL_CHANNELS}
    )
    timing_window_turns: int = 8

    def __post_init__(self):
        for name, spec in self.metadata_allowlist.items():
            if not _valid_spec(spec):
                raise PolicyError(f"metadata_allowlist.{name}: bad type spec {spec!r}")
        for tool, args in self.tool_schemas.items():
            for arg, spec in args.items():
                if not _valid_spec(spec):
                    raise PolicyError(f"tool_schemas.{tool}.{arg}: bad type spec {spec!r}")
        if self.timing_buckets < 1 or self.timing_window_turns < 1:
            raise PolicyError("timing_buckets and timing_window_turns must be >= 1")
        if set(self.residual_budgets) != set(RESIDUAL_CHANNELS):
            raise PolicyError(f"residual_budgets must name exactly {RESIDUAL_CHANNELS}")
        for channel, bits in self.residual_budgets.items():
            if not math.isfinite(float(bits)) or float(bits) < 0:
                raise PolicyError(f"residual budget {channel} must be finite and >= 0")
        for intent, entry in self.latent_schema.items():
            if set(entry) != {"tool", "slots", "env_action"}:
                raise PolicyError(f"latent_schema.{intent}: needs tool, slots, env_action")

    def to_value(self) -> dict:
        return {
            "version": self.version,
            "metadata_allowlist": {k: _spec_value(v) for k, v in self.metadata_allowlist.items()},
            "tool_schemas": {t: {a: _spec_value(s) for a, s in args.items()} for t, args in self.tool_schemas.items()},
            "env_action_allowlist": {
                a: {p: _spec_value(s) for p, s in params.items()} for a, params in self.env_action_allowlist.items()
            },
            "timing_buckets": self.timing_buckets,
            "timing_window_turns": self.timing_window_turns,
            "latent_schema_id": self.latent_schema_id,
            "latent_schema": {
                i: {"tool": e["tool"], "slots": {s: _spec_value(v) for s, v in e["slots"].items()},
                    "env_action": e["env_action"]}
                for i, e in self.latent_schema.items()
            },
            "tie_break_rule_id": self.tie_break_rule_id,
            "residual_budgets": {k: Decimal(repr(float(v))) for k, v in self.residual_budgets.items()},
        }

    @classmethod
    def from_value(cls, value: Mapping[str, Any]) -> "PolicyDocument":
        try:
            return cls(
                version=value["version"],
                metadata_allowlist=dict(value["metadata_allowlist"]),
                tool_schemas={t: dict(a) for t, a in value["tool_schemas"].items()},
                env_action_allowlist={a: dict(p) for a, p in value["env_action_allowlist"].items()},
                timing_buckets=int(value["timing_buckets"]),
                timing_window_turns=int(value["timing_window_turns"]),
                latent_schema_id=value["latent_schema_id"],
                latent_schema={i: dict(e) for i, e in value["latent_schema"].items()},
                tie_break_rule_id=value["tie_break_rule_id"],
                residual_budgets={k: float(v) for k, v in value["residual_budgets"].items()},
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise PolicyError(f"malformed policy document: {exc!r}") from exc

    def canonical(self) -> CanonicalBytes:
        return _memo(self, "_canonical", lambda: canonicalize(self.to_value()))

    @cached_property
    def policy_hash(self) -> Digest:
        return digest(self.canonical())

    @property
    def residual_per_turn(self) -> float:
        return float(sum(self.residual_budgets.values()))


def _spec_value(spec: Any) -> Any:
    return list(spec) if isinstance(spec, (list, tuple)) else spec


def save_policy(path: str | Path, policy: PolicyDocument) -> Digest:
    """Write the canonical policy plus a detached ``.digest`` file."""
    path = Path(path)
    data = policy.canonical().bytes
    path.write_bytes(data)
    Path(str(path) + ".digest").write_text(policy.policy_hash.hex() + "\n")
    return policy.policy_hash


def load_policy(path: str | Path) -> PolicyDocument:
    path = Path(path)
    data = path.read_bytes()
    detached = Path(str(path) + ".digest")
    if detached.exists() and detached.read_text().strip() != digest(data).hex():
        raise PolicyError(f"{path}: detached digest does not match contents")
    policy = PolicyDocument.from_value(decode(data))
    if policy.policy_hash != digest(data):
        raise PolicyError(f"{path}: policy file is not in canonical form")
    return policy


# -- schema validation --------------------------------------------------------

@dataclass(frozen=True)
class SchemaVerdict:
    ok: bool
    path: str | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


_OK = SchemaVerdict(True)


def validate_schema(env: Envelope, policy: PolicyDocument) -> SchemaVerdict:
    """Check the overt fields against the policy's allowlists and type specs.

    Returns the first violated constraint with a stable path; violations are
    verdicts, never exceptions.
    """
    for key, val in env.metadata.items():
        if key not in policy.metadata_allowlist:
            return SchemaVerdict(False, f"metadata.{key}", "key not allowlisted")
        problem = check_type(val, policy.metadata_allowlist[key])
        if problem:
            return SchemaVerdict(False, f"metadata.{key}", problem)

    if env.tool_call is not None:
        call = env.tool_call
        if call.tool_id not in policy.tool_schemas:
            return SchemaVerdict(False, "tool_call.tool_id", f"tool {call.tool_id!r} not allowlisted")
        schema = policy.tool_schemas[call.tool_id]
        for arg, val in call.args.items():
            if arg not in schema:
                return SchemaVerdict(False, f"tool_call.args.{arg}", "argument not declared")
            problem = check_type(val, schema[arg])
            if problem:
                return SchemaVerdict(False, f"tool_call.args.{arg}", problem)
        for arg in schema:
            if arg not in call.args:
                return SchemaVerdict(False, f"tool_call.args.{arg}", "declared argument missing")

    if not 0 <= env.timing.bucket < policy.timing_buckets:
        return SchemaVerdict(False, "timing.bucket", f"bucket {env.timing.bucket} outside [0, {policy.timing_buckets})")
    if env.timing.window < 0:
        return SchemaVerdict(False, "timing.window", "negative window")

    for i, action in enumerate(env.env_actions):
        path = f"env_actions[{i}]"
        if action.action_id not in policy.env_action_allowlist:
            return SchemaVerdict(False, f"{path}.action_id", f"action {action.action_id!r} not allowlisted")
        schema = policy.env_action_allowlist[action.action_id]
        for name, val in action.params.items():
            if name not in schema:
                return SchemaVerdict(False, f"{path}.params.{name}", "parameter not declared")
            problem = check_type(val, schema[name])
            if problem:
                return SchemaVerdict(False, f"{path}.params.{name}", problem)
        for name in schema:
            if name not in action.params:
                return SchemaVerdict(False, f"{path}.params.{name}", "declared parameter missing")
    if env.turn_index < 0:
        return SchemaVerdict(False, "turn_index", "negative turn index")
    return _OK


def bind_input(allowed_info: Any) -> Digest:
    """Digest of the canonical allowed-information object A_t."""
    return digest_value(allowed_info)


@dataclass(frozen=True)
class PredicateContext:
    """Everything the verifier needs besides the envelope itself.

    ``tasks`` is the public task registry keyed by input-hash hex; the
    latent clause looks up the bound task there.  ``turn_index`` and
    ``seen_payload_digests`` come from the transcript state.
    """

    expected_policy_hash: Digest
    prev_digest: Digest
    seed_context: "SeedContext"
    proof_settings: "ProofSettings"
    turn_index: int = 0
    seen_payload_digests: AbstractSet[bytes] = frozenset()
    tasks: Mapping[str, "TaskInstance"] = field(default_factory=dict)
    receipt_keys: Mapping[str, bytes] = field(default_factory=dict)
    latent_profile: "LatentProfile | str" = "honest_enforcing"


# -- envelope log files -------------------------------------------------------

def write_envelope_log(path: str | Path, records: list[bytes]) -> None:
    """One envelope per line, hex of its wire bytes."""
    with open(path, "w", encoding="ascii") as fh:
        for data in records:
            fh.write(data.hex() + "\n")


def read_envelope_log(path: str | Path) -> list[bytes]:
    with open(path, encoding="ascii") as fh:
        return [bytes.fromhex(line.strip()) for line in fh if line.strip()]
