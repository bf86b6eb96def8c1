"""The admission boundary.

``admit_full`` evaluates the predicate clause by clause and returns the
first failing clause as a reason code.  The clause order is fixed::

    schema -> policy -> seed -> chain -> latent -> canonicalization -> proof

``schema`` is the structural decode + allowlist check that has to succeed
before any clause can be read off the envelope; the remaining six are the
factorized predicate.  The transcript only ever advances through
:class:`Verifier.submit` / :func:`apply_admission`.
"""

from __future__ import annotations

import hashlib
import hmac
import threading
import time
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .canonical import (
    ZERO_DIGEST,
    ChainLink,
    Digest,
    canonicalize,
    decode,
    digest,
    extend_chain,
    is_canonical,
    verify_chain,
)
from .catalog import TaskInstance, encode_honest, render
from .envelope import (
    Envelope,
    EnvelopeFormatError,
    LatentObject,
    PolicyDocument,
    PredicateContext,
    ProofReceipt,
    check_type,
    validate_schema,
)
from .errors import UnknownEpoch, UnknownIntent
from .randomness import PublicRandomness, SeedContext, derive_randomness

MOCK_MECHANISM = "mock_keyed_receipt"


class ReasonCode(str, Enum):
    OK = "ok"
    SCHEMA = "schema"
    CHAIN = "chain"
    POLICY = "policy"
    SEED = "seed"
    LATENT = "latent"
    CANONICALIZATION = "canonicalization"
    PROOF = "proof"

    def __str__(self) -> str:
        return self.value


CLAUSE_ORDER = (
    ReasonCode.SCHEMA,
    ReasonCode.POLICY,
    ReasonCode.SEED,
    ReasonCode.CHAIN,
    ReasonCode.LATENT,
    ReasonCode.CANONICALIZATION,
    ReasonCode.PROOF,
)
ALL_CLAUSES = frozenset(CLAUSE_ORDER)


class LatentProfile(str, Enum):
    PERMISSIVE = "permissive"          # any option in the bound task's set
    CONTRACT = "contract"              # any max-utility option
    HONEST_ENFORCING = "honest_enforcing"  # exactly the tie-break selection


@dataclass(frozen=True)
class AdmissionVerdict:
    accepted: bool
    reason: ReasonCode
    clause_margins: Mapping[str, str]
    turn_index: int

    def to_value(self) -> dict:
        return {
            "accepted": self.accepted,
            "reason": self.reason.value,
            "clause_margins": dict(self.clause_margins),
            "turn_index": self.turn_index,
        }

    @classmethod
    def from_value(cls, value: Mapping) -> "AdmissionVerdict":
        return cls(bool(value["accepted"]), ReasonCode(value["reason"]), dict(value["clause_margins"]),
                   int(value["turn_index"]))


@dataclass(frozen=True)
class ProofSettings:
    mode: str = "strict"
    cadence: int = 1
    require_receipt_on_proved_turns: bool = True
    prover_cost_ms: float = 0.0

    def __post_init__(self):
        if self.mode not in ("strict", "sampled"):
            raise ValueError(f"unknown proof mode {self.mode!r}")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.mode == "strict" and self.cadence != 1:
            raise ValueError("strict mode implies cadence 1")


def proving_schedule(settings: ProofSettings, turn_index: int) -> bool:
    if settings.mode == "strict":
        return True
    return turn_index % settings.cadence == 0


# -- mock proof mechanism ---------------------------------------------------

@dataclass(frozen=True)
class ReceiptParts:
    policy_hash: Digest
    input_hash: Digest
    latent_bytes: bytes
    payload_digest: Digest
    randomness: bytes

    def message(self) -> bytes:
        return (
            self.policy_hash.value
            + self.input_hash.value
            + len(self.latent_bytes).to_bytes(8, "big")
            + self.latent_bytes
            + self.payload_digest.value
            + self.randomness
        )


def receipt_parts(env: Envelope, rand: PublicRandomness) -> ReceiptParts:
    return ReceiptParts(env.policy_hash, env.input_hash, env.latent.canonical().bytes, env.payload_digest(), rand.value)


def make_receipt(parts: ReceiptParts, key_epoch: str, receipt_key: bytes) -> ProofReceipt:
    tag = hmac.new(receipt_key, parts.message(), hashlib.sha256).digest()
    return ProofReceipt(MOCK_MECHANISM, Digest(tag), key_epoch)


def verify_receipt(receipt: ProofReceipt, parts: ReceiptParts, receipt_key: bytes, key_epoch: str | None = None) -> bool:
    if receipt.mechanism_id != MOCK_MECHANISM:
        return False
    if key_epoch is not None and receipt.key_epoch != key_epoch:
        return False
    expected = hmac.new(receipt_key, parts.message(), hashlib.sha256).digest()
    return hmac.compare_digest(expected, receipt.binding.value)


def receipt_key_for(keys: Mapping[str, bytes], key_epoch: str) -> bytes:
    try:
        return keys[key_epoch]
    except KeyError:
        raise UnknownEpoch(key_epoch) from None


def simulate_prover_cost(cost_ms: float) -> None:
    """Stand-in for proving time: sleep, then spin out the last millisecond."""
    if cost_ms <= 0:
        return
    deadline = time.perf_counter() + cost_ms / 1000.0
    if cost_ms > 2:
        time.sleep((cost_ms - 1) / 1000.0)
    while time.perf_counter() < deadline:
        pass


def build_envelope(
    task: TaskInstance,
    latent: LatentObject,
    rand: PublicRandomness,
    policy: PolicyDocument,
    proof_settings: ProofSettings | None = None,
    receipt_key: bytes | None = None,
    key_epoch: str = "epoch-0",
) -> Envelope:
    """Producer side: render ``latent`` and seal it against the chain position in ``rand``."""
    fields = render(latent, rand, policy)
    env = Envelope(
        message=fields.message,
        metadata=fields.metadata,
        tool_call=fields.tool_call,
        timing=fields.timing,
        env_actions=fields.env_actions,
        policy_hash=policy.policy_hash,
        input_hash=task.input_hash,
        latent=latent,
        randomness_commitment=rand.commitment(),
        prev_digest=rand.prev_digest,
        turn_index=rand.turn_index,
    )
    return seal(env, rand, proof_settings, receipt_key, key_epoch)


def seal(
    env: Envelope,
    rand: PublicRandomness,
    proof_settings: ProofSettings | None,
    receipt_key: bytes | None,
    key_epoch: str = "epoch-0",
) -> Envelope:
    """Attach a receipt when the schedule says this turn is proved."""
    if proof_settings is None or receipt_key is None or not proving_schedule(proof_settings, rand.turn_index):
        return env
    simulate_prover_cost(proof_settings.prover_cost_ms)
    return env.replace(proof=make_receipt(receipt_parts(env, rand), key_epoch, receipt_key))


# -- clause evaluation --------------------------------------------------------

def _reject(reason: ReasonCode, detail: str, margins: dict, turn: int) -> AdmissionVerdict:
    margins[reason.value] = detail
    return AdmissionVerdict(False, reason, margins, turn)


def _latent_check(env: Envelope, ctx: PredicateContext, policy: PolicyDocument, rand: PublicRandomness) -> str | None:
    latent = env.latent
    entry = policy.latent_schema.get(latent.intent_id)
    if entry is None:
        return f"intent {latent.intent_id!r} not in latent schema {policy.latent_schema_id}"
    if set(latent.slots) != set(entry["slots"]):
        return "slot set does not match latent schema"
    for name, val in latent.slots.items():
        problem = check_type(val, entry["slots"][name])
        if problem:
            return f"slot {name}: {problem}"
    task = ctx.tasks.get(env.input_hash.hex())
    if task is None:
        return "input hash not bound to a registered task"
    if not (0 <= latent.option_index < task.option_count) or task.options[latent.option_index] != latent:
        return "latent is not in the task's option set"
    profile = LatentProfile(ctx.latent_profile)
    if profile is LatentProfile.CONTRACT and latent.option_index not in task.argmax_indices:
        return "latent is not a max-utility option"
    if profile is LatentProfile.HONEST_ENFORCING and encode_honest(task, rand) != latent:
        return "latent differs from the public tie-break selection"
    return None


def _canonical_fields_check(env: Envelope, raw: bytes | None, policy: PolicyDocument, rand: PublicRandomness) -> str | None:
    # stricter than is_canonical: digest hex case and every other field
    # representation must also match the envelope's own encoding
    if raw is not None and raw != env.to_bytes():
        return "envelope bytes are not canonical"
    if env.tool_call is not None and not env.tool_call.arg_order_canonical:
        return "tool arguments not in canonical order"
    if [a.order_index for a in env.env_actions] != list(range(len(env.env_actions))):
        return "env action order_index not contiguous from 0"
    if env.timing.window != env.turn_index // policy.timing_window_turns:
        return "timing window does not match turn"
    if env.message != unicodedata.normalize("NFC", env.message) or env.message != env.message.strip():
        return "message text not normalized"
    try:
        expected = render(env.latent, rand, policy)
    except UnknownIntent:
        return "latent intent has no render template"
    if env.message != expected.message:
        return "message differs from deterministic rendering"
    if dict(env.metadata) != expected.metadata:
        return "metadata differs from deterministic rendering"
    if env.tool_call != expected.tool_call:
        return "tool call differs from deterministic rendering"
    if tuple(env.env_actions) != expected.env_actions:
        return "env actions differ from deterministic rendering"
    if env.timing != expected.timing:
        return "timing fields differ from deterministic rendering"
    return None


def _proof_check(env: Envelope, ctx: PredicateContext, rand: PublicRandomness) -> str | None:
    settings = ctx.proof_settings
    required = proving_schedule(settings, env.turn_index) and settings.require_receipt_on_proved_turns
    if env.proof is None:
        return "receipt required on this turn" if required else None
    # a receipt that is present is always checked, required or not
    try:
        key = receipt_key_for(ctx.receipt_keys, env.proof.key_epoch)
    except UnknownEpoch:
        return f"unknown receipt epoch {env.proof.key_epoch!r}"
    if not verify_receipt(env.proof, receipt_parts(env, rand), key):
        return "receipt does not verify"
    return None


def evaluate_clauses(
    candidate: Envelope | bytes,
    ctx: PredicateContext,
    policy: PolicyDocument,
    clauses: Iterable[ReasonCode] = ALL_CLAUSES,
) -> AdmissionVerdict:
    """Evaluate an ordered subset of clauses; the first failure is the verdict."""
    enabled = frozenset(ReasonCode(c) for c in clauses)
    raw = bytes(candidate) if isinstance(candidate, (bytes, bytearray)) else None
    # schema: the candidate must decode into the envelope structure at all
    try:
        env = Envelope.from_bytes(raw) if raw is not None else candidate
    except EnvelopeFormatError as exc:
        return _reject(ReasonCode.SCHEMA, str(exc), {}, ctx.turn_index)
    return _evaluate_parsed(env, raw, ctx, policy, enabled)


def _evaluate_parsed(
    env: Envelope,
    raw: bytes | None,
    ctx: PredicateContext,
    policy: PolicyDocument,
    enabled: frozenset,
) -> AdmissionVerdict:
    margins: dict[str, str] = {}
    turn = ctx.turn_index
    if ReasonCode.SCHEMA in enabled:
        verdict = validate_schema(env, policy)
        if not verdict.ok:
            return _reject(ReasonCode.SCHEMA, f"{verdict.path}: {verdict.detail}", margins, turn)
        margins["schema"] = "pass"

    if ReasonCode.POLICY in enabled:
        if env.policy_hash != ctx.expected_policy_hash:
            return _reject(ReasonCode.POLICY, "policy hash mismatch", margins, turn)
        margins["policy"] = "pass"

    rand = derive_randomness(ctx.seed_context, env.prev_digest, env.turn_index)
    if ReasonCode.SEED in enabled:
        if env.randomness_commitment != rand.commitment():
            return _reject(ReasonCode.SEED, "randomness commitment does not match schedule", margins, turn)
        margins["seed"] = "pass"

    if ReasonCode.CHAIN in enabled:
        if env.prev_digest != ctx.prev_digest:
            return _reject(ReasonCode.CHAIN, "prev_digest is not the transcript head", margins, turn)
        if env.turn_index != ctx.turn_index:
            return _reject(ReasonCode.CHAIN, f"turn_index {env.turn_index} != expected {ctx.turn_index}", margins, turn)
        if env.payload_digest().value in ctx.seen_payload_digests:
            return _reject(ReasonCode.CHAIN, "replayed payload", margins, turn)
        margins["chain"] = "pass"

    if ReasonCode.LATENT in enabled:
        problem = _latent_check(env, ctx, policy, rand)
        if problem:
            return _reject(ReasonCode.LATENT, problem, margins, turn)
        margins["latent"] = "pass"

    if ReasonCode.CANONICALIZATION in enabled:
        problem = _canonical_fields_check(env, raw, policy, rand)
        if problem:
            return _reject(ReasonCode.CANONICALIZATION, problem, margins, turn)
        margins["canonicalization"] = "pass"

    if ReasonCode.PROOF in enabled:
        problem = _proof_check(env, ctx, rand)
        if problem:
            return _reject(ReasonCode.PROOF, problem, margins, turn)
        margins["proof"] = "pass"

    return AdmissionVerdict(True, ReasonCode.OK, margins, turn)


def admit_full(candidate: Envelope | bytes, ctx: PredicateContext, policy: PolicyDocument) -> AdmissionVerdict:
    return evaluate_clauses(candidate, ctx, policy, ALL_CLAUSES)


def admit_simple(candidate: Envelope | bytes, ctx: PredicateContext, policy: PolicyDocument) -> AdmissionVerdict:
    """Proof-of-concept admission: canonicalize, schema, chain."""
    turn = ctx.turn_index
    margins: dict[str, str] = {}
    try:
        env = Envelope.from_bytes(bytes(candidate)) if isinstance(candidate, (bytes, bytearray)) else candidate
    except EnvelopeFormatError as exc:
        return _reject(ReasonCode.SCHEMA, str(exc), margins, turn)
    verdict = validate_schema(env, policy)
    if not verdict.ok:
        return _reject(ReasonCode.SCHEMA, f"{verdict.path}: {verdict.detail}", margins, turn)
    margins["schema"] = "pass"
    if env.prev_digest != ctx.prev_digest or env.turn_index != ctx.turn_index:
        return _reject(ReasonCode.CHAIN, "stale chain position", margins, turn)
    if env.payload_digest().value in ctx.seen_payload_digests:
        return _reject(ReasonCode.CHAIN, "replayed payload", margins, turn)
    margins["chain"] = "pass"
    return AdmissionVerdict(True, ReasonCode.OK, margins, turn)


# -- transcript state ---------------------------------------------------------

@dataclass(frozen=True)
class AdmittedRecord:
    envelope_bytes: bytes
    verdict: AdmissionVerdict
    link: ChainLink
    envelope: Envelope | None = field(default=None, compare=False, repr=False)  # parsed form, not serialized

    def parsed(self) -> Envelope:
        return self.envelope if self.envelope is not None else Envelope.from_bytes(self.envelope_bytes)

    def to_value(self) -> dict:
        return {"envelope": self.envelope_bytes.hex(), "verdict": self.verdict.to_value(), "link": self.link.to_value()}

    @classmethod
    def from_value(cls, value: Mapping) -> "AdmittedRecord":
        return cls(bytes.fromhex(value["envelope"]), AdmissionVerdict.from_value(value["verdict"]),
                   ChainLink.from_value(value["link"]))


@dataclass(frozen=True)
class RejectionRecord:
    candidate_digest: Digest
    reason: ReasonCode
    turn_index: int
    detail: str = ""

    def to_value(self) -> dict:
        return {"candidate_digest": self.candidate_digest.hex(), "reason": self.reason.value,
                "turn": self.turn_index, "detail": self.detail}


@dataclass
class TranscriptState:
    head: Digest = ZERO_DIGEST
    turn_index: int = 0
    admitted_log: list[AdmittedRecord] = field(default_factory=list)
    seen_digests: set[bytes] = field(default_factory=set)
    rejection_ledger: list[RejectionRecord] = field(default_factory=list)

    def _admit(self, env: Envelope, verdict: AdmissionVerdict, raw: bytes | None = None) -> ChainLink:
        link = extend_chain(self.head, env.payload(), self.turn_index)
        self.admitted_log.append(AdmittedRecord(raw if raw is not None else env.to_bytes(), verdict, link, env))
        self.seen_digests.add(link.payload_digest.value)
        self.head = link.link
        self.turn_index += 1
        return link

    def verify_log(self) -> bool:
        """Replay every logged payload from genesis and compare with the head."""
        try:
            payloads = [Envelope.from_bytes(r.envelope_bytes).payload() for r in self.admitted_log]
        except EnvelopeFormatError:
            return False
        if verify_chain([r.link for r in self.admitted_log], payloads) is not None:
            return False
        if any(r.verdict.reason is not ReasonCode.OK for r in self.admitted_log):
            return False
        expected_head = self.admitted_log[-1].link.link if self.admitted_log else ZERO_DIGEST
        return expected_head == self.head and len(self.admitted_log) == self.turn_index

    def reason_counts(self) -> dict[str, int]:
        counts = {"ok": len(self.admitted_log)}
        for r in self.rejection_ledger:
            counts[r.reason.value] = counts.get(r.reason.value, 0) + 1
        return counts


class Verifier:
    """Single-writer admission runtime for one transcript."""

    def __init__(
        self,
        policy: PolicyDocument,
        seed_context: SeedContext,
        proof_settings: ProofSettings | None = None,
        tasks: Mapping[str, TaskInstance] | None = None,
        receipt_keys: Mapping[str, bytes] | None = None,
        latent_profile: LatentProfile | str = LatentProfile.HONEST_ENFORCING,
        clauses: Iterable[ReasonCode] = ALL_CLAUSES,
        state: TranscriptState | None = None,
    ):
        self.policy = policy
        self.seed_context = seed_context
        self.proof_settings = proof_settings or ProofSettings()
        self.tasks = dict(tasks or {})
        self.receipt_keys = dict(receipt_keys or {})
        self.latent_profile = LatentProfile(latent_profile)
        self.clauses = frozenset(ReasonCode(c) for c in clauses)
        self.state = state or TranscriptState()
        self._lock = threading.Lock()

    def context(self) -> PredicateContext:
        return PredicateContext(
            expected_policy_hash=self.policy.policy_hash,
            prev_digest=self.state.head,
            seed_context=self.seed_context,
            proof_settings=self.proof_settings,
            turn_index=self.state.turn_index,
            # live view of the replay guard; only read while the lock is held
            seen_payload_digests=self.state.seen_digests,
            tasks=self.tasks,
            receipt_keys=self.receipt_keys,
            latent_profile=self.latent_profile,
        )

    def next_randomness(self) -> PublicRandomness:
        return derive_randomness(self.seed_context, self.state.head, self.state.turn_index)

    def submit(self, candidate: Envelope | bytes) -> AdmissionVerdict:
        with self._lock:
            ctx = self.context()
            raw = bytes(candidate) if isinstance(candidate, (bytes, bytearray)) else None
            try:
                env = Envelope.from_bytes(raw) if raw is not None else candidate
            except EnvelopeFormatError as exc:
                env = None
                verdict = _reject(ReasonCode.SCHEMA, str(exc), {}, ctx.turn_index)
            else:
                verdict = _evaluate_parsed(env, raw, ctx, self.policy, self.clauses)
            if verdict.accepted:
                self.state._admit(env, verdict, raw)
            else:
                raw = raw if raw is not None else _safe_bytes(candidate)
                self.state.rejection_ledger.append(
                    RejectionRecord(digest(raw), verdict.reason, ctx.turn_index,
                                    verdict.clause_margins.get(verdict.reason.value, ""))
                )
            return verdict


def mutation_fixtures(
    verifier: Verifier,
    task: TaskInstance,
    receipt_key: bytes,
    key_epoch: str = "epoch-0",
) -> dict[ReasonCode, bytes]:
    """One candidate per reason code for the verifier's next turn.

    Every reject fixture changes a single field of the honest candidate,
    except ``chain``, which replays the last admitted envelope (any field
    edit that moves the chain position also moves the scheduled randomness
    and trips ``seed`` first).  Needs a task with two or more options and at
    least one admitted turn.
    """
    if not verifier.state.admitted_log:
        raise ValueError("mutation fixtures need one admitted turn to replay")
    rand = verifier.next_randomness()
    honest = encode_honest(task, rand)
    others = [o for o in task.options if o != honest]
    if not others:
        raise ValueError("mutation fixtures need a task with at least two options")
    settings = ProofSettings("strict", 1)
    base = build_envelope(task, honest, rand, verifier.policy, settings, receipt_key, key_epoch)
    forged = ProofReceipt(base.proof.mechanism_id, digest(b"forged receipt"), base.proof.key_epoch)
    R = ReasonCode
    return {
        R.OK: base.to_bytes(),
        R.SCHEMA: base.replace(metadata={**base.metadata, "unlisted_field": "x"}).to_bytes(),
        R.POLICY: base.replace(policy_hash=digest(b"another policy")).to_bytes(),
        R.SEED: base.replace(randomness_commitment=digest(b"unscheduled")).to_bytes(),
        R.CHAIN: verifier.state.admitted_log[-1].envelope_bytes,
        R.LATENT: base.replace(latent=others[0]).to_bytes(),
        R.CANONICALIZATION: base.replace(message=base.message + " ").to_bytes(),
        R.PROOF: base.replace(proof=forged).to_bytes(),
    }


def _safe_bytes(env: Envelope) -> bytes:
    try:
        return env.to_bytes()
    except Exception:  # an unencodable candidate still gets a ledger entry
        return repr(env).encode("utf-8")


def apply_admission(
    candidates: Sequence[Envelope | bytes],
    ctx0: PredicateContext,
    policy: PolicyDocument,
) -> TranscriptState:
    """Per-turn filtering of a candidate sequence by the full predicate."""
    state = TranscriptState(head=ctx0.prev_digest, turn_index=ctx0.turn_index,
                            seen_digests=set(ctx0.seen_payload_digests))
    verifier = Verifier(policy, ctx0.seed_context, ctx0.proof_settings, ctx0.tasks, ctx0.receipt_keys,
                        ctx0.latent_profile, state=state)
    for candidate in candidates:
        verifier.submit(candidate)
    return state


# -- transcript files -----------------------------------------------------------

def write_transcript(path: str | Path, state: TranscriptState) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in state.admitted_log:
            fh.write(canonicalize(record.to_value()).text() + "\n")


def read_transcript(path: str | Path) -> list[AdmittedRecord]:
    with open(path, encoding="utf-8") as fh:
        return [AdmittedRecord.from_value(decode(line.strip())) for line in fh if line.strip()]


def write_rejections(path: str | Path, state: TranscriptState) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in state.rejection_ledger:
            fh.write(canonicalize(record.to_value()).text() + "\n")


def state_from_records(records: Sequence[AdmittedRecord]) -> TranscriptState:
    """Rebuild a transcript state from a log file (re-verify with ``verify_log``)."""
    state = TranscriptState()
    state.admitted_log = list(records)
    if records:
        state.head = records[-1].link.link
    state.turn_index = len(records)
    state.seen_digests = {r.link.payload_digest.value for r in records}
    return state
