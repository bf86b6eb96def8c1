"""Verifier-bound admission for agent-to-agent messages.

Messages travel as canonical envelopes that commit to a latent choice,
the policy, public per-turn randomness and the transcript head.  The
verifier admits an envelope only when every clause holds, which leaves a
colluding sender little room beyond the latent choice itself; the
leakage, colluder and audit modules measure how little.
"""

from .canonical import Digest, canonicalize, decode, digest, extend_chain, verify_chain
from .catalog import Catalog, TaskInstance, desk_policy, encode_honest, generate_catalog, render, score_utility
from .envelope import Envelope, LatentObject, PolicyDocument, PredicateContext, validate_schema
from .errors import ClbcError, PipelineFailure
from .randomness import PublicRandomness, SeedContext, derive_randomness, tie_break
from .verifier import AdmissionVerdict, ProofSettings, ReasonCode, Verifier, admit_full, admit_simple

__version__ = "0.1.0"

__all__ = [
    "AdmissionVerdict",
    "Catalog",
    "ClbcError",
    "Digest",
    "Envelope",
    "LatentObject",
    "PipelineFailure",
    "PolicyDocument",
    "PredicateContext",
    "ProofSettings",
    "PublicRandomness",
    "ReasonCode",
    "SeedContext",
    "TaskInstance",
    "Verifier",
    "admit_full",
    "admit_simple",
    "canonicalize",
    "decode",
    "derive_randomness",
    "desk_policy",
    "digest",
    "encode_honest",
    "extend_chain",
    "generate_catalog",
    "render",
    "score_utility",
    "tie_break",
    "validate_schema",
    "verify_chain",
]
