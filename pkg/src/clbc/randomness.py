"""Public randomness schedule, epoch commitments and the tie-break selector."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .canonical import Digest, canonicalize, decode, digest
from .errors import NegativeTurn, PolicyError, ZeroOptions


@dataclass(frozen=True)
class SeedContext:
    schedule_seed: bytes
    epoch_id: str

    def __post_init__(self):
        if len(self.schedule_seed) != 32:
            raise ValueError("schedule_seed must be 32 octets")

    def commitment(self) -> Digest:
        return digest(self.schedule_seed)

    @classmethod
    def from_label(cls, label: str, epoch_id: str | None = None) -> "SeedContext":
        """Deterministic seed for tests and simulations (not for deployment)."""
        return cls(digest(label.encode("utf-8")).value, epoch_id or label)


@dataclass(frozen=True)
class PublicRandomness:
    value: bytes
    turn_index: int
    prev_digest: Digest

    @property
    def derivation_witness(self) -> tuple[Digest, int]:
        return self.prev_digest, self.turn_index

    def commitment(self) -> Digest:
        return digest(self.value)


def derive_randomness(ctx: SeedContext, prev_digest: Digest, turn_index: int) -> PublicRandomness:
    """R_t = H(seed || h_{t-1} || t as 8-octet big-endian)."""
    if turn_index < 0:
        raise NegativeTurn(f"turn_index must be >= 0, got {turn_index}")
    value = digest(ctx.schedule_seed + prev_digest.value + turn_index.to_bytes(8, "big")).value
    return PublicRandomness(value, turn_index, prev_digest)


def tie_break(rand: PublicRandomness | bytes, option_count: int) -> int:
    """Leading 8 octets as a big-endian integer, reduced mod the option count.

    The modulo bias is at most ``option_count / 2**64``, negligible for the
    option counts a policy can declare.
    """
    if option_count < 1:
        raise ZeroOptions("tie_break needs at least one option")
    value = rand.value if isinstance(rand, PublicRandomness) else rand
    return int.from_bytes(value[:8], "big") % option_count


def verify_commitment(ctx: SeedContext, published: Digest) -> bool:
    return ctx.commitment() == published


@dataclass(frozen=True)
class EpochCommitment:
    epoch_id: str
    seed_commitment: Digest
    policy_hash: Digest

    def to_value(self) -> dict:
        return {
            "epoch_id": self.epoch_id,
            "seed_commitment": self.seed_commitment.hex(),
            "policy_hash": self.policy_hash.hex(),
        }

    @classmethod
    def from_value(cls, value: dict) -> "EpochCommitment":
        return cls(value["epoch_id"], Digest.fromhex(value["seed_commitment"]), Digest.fromhex(value["policy_hash"]))


def publish_epoch(path: str | Path, ctx: SeedContext, policy_hash: Digest) -> EpochCommitment:
    record = EpochCommitment(ctx.epoch_id, ctx.commitment(), policy_hash)
    Path(path).write_bytes(canonicalize(record.to_value()).bytes + b"\n")
    return record


def load_epoch(path: str | Path) -> EpochCommitment:
    return EpochCommitment.from_value(decode(Path(path).read_bytes().strip()))


def check_epoch(ctx: SeedContext, record: EpochCommitment) -> None:
    """Refuse a seed whose digest differs from the published commitment."""
    if record.epoch_id != ctx.epoch_id or not verify_commitment(ctx, record.seed_commitment):
        raise PolicyError(f"seed for epoch {ctx.epoch_id!r} does not match its published commitment")
