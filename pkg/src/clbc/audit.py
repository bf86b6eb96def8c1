"""Seeded challenge audits over admitted transcripts.

The responder only reads the transcript log; the auditor only reads the
packet plus public commitments (the epoch record and the published list of
chain heads).  Four checks run per packet, in order: policy-hash binding,
chain continuity, proof-type consistency, reason-code correctness.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .canonical import ZERO_DIGEST, ChainLink, Digest, canonicalize, decode, digest, digest_value, link_is_consistent
from .envelope import Envelope, EnvelopeFormatError
from .errors import BadM, BadParams, EpochMismatch, MissingTurn
from .verifier import MOCK_MECHANISM, AdmittedRecord, ProofSettings, ReasonCode, proving_schedule

CHECKS = ("policy-hash binding", "chain continuity", "proof-type consistency", "reason-code correctness")
VERIFIER_VERSION = "clbc-verifier-1"


@dataclass(frozen=True)
class AuditEpoch:
    epoch_id: str
    policy_hash: Digest
    verifier_version: str
    allowed_mechanisms: tuple[str, ...]
    challenge_rate: float
    proof_cadence: int = 1          # 1 = every turn proved
    seed_commitment: Digest = ZERO_DIGEST

    def __post_init__(self):
        if not (0 < self.challenge_rate <= 1):
            raise BadParams("challenge_rate must be in (0, 1]")
        if self.proof_cadence < 1:
            raise BadParams("proof_cadence must be >= 1")
        object.__setattr__(self, "allowed_mechanisms", tuple(sorted(self.allowed_mechanisms)))

    def _body(self) -> dict:
        return {
            "epoch_id": self.epoch_id,
            "policy_hash": self.policy_hash.hex(),
            "verifier_version": self.verifier_version,
            "allowed_mechanisms": list(self.allowed_mechanisms),
            "challenge_rate": self.challenge_rate,
            "proof_cadence": self.proof_cadence,
            "seed_commitment": self.seed_commitment.hex(),
        }

    @property
    def commitment_digest(self) -> Digest:
        return digest_value(self._body())

    @property
    def proof_settings(self) -> ProofSettings:
        if self.proof_cadence == 1:
            return ProofSettings("strict", 1)
        return ProofSettings("sampled", self.proof_cadence)

    def to_value(self) -> dict:
        return {**self._body(), "commitment_digest": self.commitment_digest.hex()}

    @classmethod
    def from_value(cls, v: Mapping) -> "AuditEpoch":
        epoch = cls(str(v["epoch_id"]), Digest.fromhex(v["policy_hash"]), str(v["verifier_version"]),
                    tuple(v["allowed_mechanisms"]), float(v["challenge_rate"]), int(v["proof_cadence"]),
                    Digest.fromhex(v["seed_commitment"]))
        if epoch.commitment_digest.hex() != v["commitment_digest"]:
            raise EpochMismatch(f"epoch {epoch.epoch_id}: commitment digest does not match its fields")
        return epoch


class EpochRegistry:
    """Published epochs; registration is serialized and an epoch never changes."""

    def __init__(self, epochs: Sequence[AuditEpoch] = ()):
        self._epochs: dict[str, AuditEpoch] = {}
        self._lock = threading.Lock()
        for e in epochs:
            self.register(e)

    def register(self, epoch: AuditEpoch) -> None:
        with self._lock:
            existing = self._epochs.get(epoch.epoch_id)
            if existing is not None and existing != epoch:
                raise EpochMismatch(f"epoch {epoch.epoch_id} already published with different fields")
            self._epochs[epoch.epoch_id] = epoch

    def get(self, epoch_id: str) -> AuditEpoch:
        try:
            return self._epochs[epoch_id]
        except KeyError:
            raise EpochMismatch(f"epoch {epoch_id!r} was never published") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(canonicalize([e.to_value() for e in self._epochs.values()]).bytes + b"\n")

    @classmethod
    def load(cls, path: str | Path) -> "EpochRegistry":
        return cls([AuditEpoch.from_value(v) for v in decode(Path(path).read_bytes().strip())])


# -- challenges ------------------------------------------------------------------------------

def select_challenges(transcript_len: int, challenge_seed: int, m: int) -> tuple[int, ...]:
    """``m`` distinct turn indices: the prefix of a seeded Fisher-Yates shuffle."""
    if not (1 <= m <= transcript_len):
        raise BadM(f"need 1 <= m <= {transcript_len}, got {m}")
    rng = np.random.default_rng(challenge_seed)
    pool = list(range(transcript_len))
    for i in range(m):
        j = i + int(rng.integers(transcript_len - i))
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(pool[:m]))


def _challenge_batch(transcript_len: int, m: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized Fisher-Yates prefixes, one row per trial (same law as ``select_challenges``)."""
    pool = np.tile(np.arange(transcript_len, dtype=np.int32), (trials, 1))
    rows = np.arange(trials)
    for i in range(m):
        j = i + rng.integers(transcript_len - i, size=trials)
        a, b = pool[rows, i].copy(), pool[rows, j]
        pool[rows, i] = b
        pool[rows, j] = a
    return pool[:, :m]


def detection_probability(f: float, m: int) -> float:
    """Chance that ``m`` challenges hit at least one of a fraction ``f`` of bad turns."""
    if not (0.0 <= f <= 1.0) or m < 0:
        raise BadParams("need 0 <= f <= 1 and m >= 0")
    return 1.0 - (1.0 - f) ** m


# -- packets ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class EvidencePacket:
    epoch_id: str
    turn_index: int
    envelope_bytes: bytes
    link: ChainLink
    reason: str
    accepted: bool

    def to_value(self) -> dict:
        return {"epoch_id": self.epoch_id, "turn_index": self.turn_index, "envelope": self.envelope_bytes.hex(),
                "link": self.link.to_value(), "reason": self.reason, "accepted": self.accepted}


def build_packet(log: Sequence[AdmittedRecord], turn_index: int, epoch_id: str) -> EvidencePacket:
    if not (0 <= turn_index < len(log)):
        raise MissingTurn(f"turn {turn_index} is not in the transcript log (length {len(log)})")
    record = log[turn_index]
    return EvidencePacket(epoch_id, turn_index, record.envelope_bytes, record.link,
                          record.verdict.reason.value, record.verdict.accepted)


def verify_packet(packet: EvidencePacket, epoch: AuditEpoch, published_heads: Sequence[Digest]) -> str | None:
    """Name of the first failing check, or ``None`` when the packet verifies."""
    if packet.epoch_id != epoch.epoch_id:
        raise EpochMismatch(f"packet from epoch {packet.epoch_id!r} checked under {epoch.epoch_id!r}")
    t = packet.turn_index
    try:
        env = Envelope.from_bytes(packet.envelope_bytes)
    except EnvelopeFormatError:
        return CHECKS[0]
    if env.policy_hash != epoch.policy_hash:
        return CHECKS[0]
    expected_prev = published_heads[t - 1] if t > 0 else ZERO_DIGEST
    link = packet.link
    if (
        t >= len(published_heads)
        or env.turn_index != t
        or link.turn_index != t
        or link.prev != expected_prev
        or env.prev_digest != expected_prev
        or link.link != published_heads[t]
        or link.payload_digest != digest(env.payload())
        or not link_is_consistent(link)
    ):
        return CHECKS[1]
    required = proving_schedule(epoch.proof_settings, t)
    if env.proof is None:
        if required:
            return CHECKS[2]
    elif env.proof.mechanism_id not in epoch.allowed_mechanisms or env.proof.key_epoch != epoch.epoch_id:
        return CHECKS[2]
    if not packet.accepted or packet.reason != ReasonCode.OK.value:
        return CHECKS[3]
    return None


@dataclass(frozen=True)
class AuditVerdict:
    passed: bool
    outcomes: tuple[tuple[int, str | None], ...]   # (turn, failing check or None)

    @property
    def failures(self) -> list[tuple[int, str]]:
        return [(t, c) for t, c in self.outcomes if c is not None]

    @property
    def f_hat(self) -> float:
        return len(self.failures) / len(self.outcomes) if self.outcomes else 0.0

    def to_value(self) -> dict:
        return {"passed": self.passed, "f_hat": self.f_hat,
                "outcomes": [{"turn": t, "check": c} for t, c in self.outcomes]}


def respond_and_verify(
    log: Sequence[AdmittedRecord],
    indices: Sequence[int],
    epoch: AuditEpoch,
    published_heads: Sequence[Digest],
) -> AuditVerdict:
    outcomes = []
    for t in sorted(indices):
        packet = build_packet(log, t, epoch.epoch_id)
        outcomes.append((t, verify_packet(packet, epoch, published_heads)))
    return AuditVerdict(all(c is None for _, c in outcomes), tuple(outcomes))


def compare_epochs(a: AuditVerdict, epoch_a: AuditEpoch, b: AuditVerdict, epoch_b: AuditEpoch) -> dict:
    """Side-by-side audit summary; refuses to merge results across epochs."""
    if epoch_a.commitment_digest != epoch_b.commitment_digest:
        raise EpochMismatch("audit results from different epochs need re-baselining, not comparison")
    return {"epoch_id": epoch_a.epoch_id, "f_hat": [a.f_hat, b.f_hat], "passed": [a.passed, b.passed]}


# -- detection Monte Carlo --------------------------------------------------------------------

def turn_validity(
    log: Sequence[AdmittedRecord], epoch: AuditEpoch, published_heads: Sequence[Digest]
) -> np.ndarray:
    """Per-turn packet validity, computed once with the real packet checks."""
    return np.array([verify_packet(build_packet(log, t, epoch.epoch_id), epoch, published_heads) is None
                     for t in range(len(log))])


def monte_carlo_detection(valid: np.ndarray, m: int, trials: int, seed: int) -> float:
    """Fraction of seeded challenge sets that hit at least one invalid turn."""
    rng = np.random.default_rng(seed)
    hits = 0
    batch = 2000
    done = 0
    while done < trials:
        size = min(batch, trials - done)
        chosen = _challenge_batch(len(valid), m, size, rng)
        hits += int(np.sum(~valid[chosen].all(axis=1)))
        done += size
    return hits / trials


def corrupt_policy_hash(record: AdmittedRecord, bogus: Digest) -> AdmittedRecord:
    """Swap the stored policy hash of one logged envelope (audit fixture)."""
    env = Envelope.from_bytes(record.envelope_bytes).replace(policy_hash=bogus)
    return AdmittedRecord(env.to_bytes(), record.verdict, record.link)


def epoch_for(verifier, challenge_rate: float = 0.1) -> AuditEpoch:
    """Public epoch record matching a running verifier's configuration."""
    settings = verifier.proof_settings
    return AuditEpoch(
        epoch_id=verifier.seed_context.epoch_id,
        policy_hash=verifier.policy.policy_hash,
        verifier_version=VERIFIER_VERSION,
        allowed_mechanisms=(MOCK_MECHANISM,),
        challenge_rate=challenge_rate,
        proof_cadence=settings.cadence,
        seed_commitment=verifier.seed_context.commitment(),
    )
