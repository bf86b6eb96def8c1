import itertools

import pytest

from clbc.canonical import ZERO_DIGEST, canonicalize, digest
from clbc.catalog import desk_policy, encode_honest
from clbc.envelope import (
    Envelope,
    EnvelopeFormatError,
    LatentObject,
    PolicyDocument,
    TimingFields,
    ToolCall,
    bind_input,
    load_policy,
    save_policy,
    validate_schema,
)
from clbc.errors import PolicyError, UnsupportedValue
from clbc.randomness import SeedContext, derive_randomness
from clbc.verifier import build_envelope

SLOTS = {"priority": ["high", "low"], "status": ["open", "revise"]}


def report_policy():
    return PolicyDocument(
        version="t-1",
        metadata_allowlist={"action": ["report"], "priority": SLOTS["priority"], "status": SLOTS["status"]},
        tool_schemas={"report": dict(SLOTS)},
        env_action_allowlist={},
        timing_buckets=4,
        latent_schema_id="t-latent",
        latent_schema={"report_status": {"tool": "report", "slots": dict(SLOTS), "env_action": None}},
    )


def minimal(policy, **changes):
    env = Envelope("", {}, None, TimingFields(0, 0), (), policy.policy_hash, ZERO_DIGEST,
                   LatentObject("report_status", {}, 0), ZERO_DIGEST, ZERO_DIGEST, 0)
    return env.replace(**changes)


def test_allowlisted_metadata_ok():
    p = report_policy()
    env = minimal(p, metadata={"action": "report", "priority": "high", "status": "revise"})
    assert validate_schema(env, p).ok


def test_alias_tool_rejected_with_path():
    p = report_policy()
    env = minimal(p, tool_call=ToolCall("notify", {"priority": "high", "status": "revise"}))
    v = validate_schema(env, p)
    assert not v.ok and v.path == "tool_call.tool_id"


def test_minimal_envelope_ok():
    p = report_policy()
    assert validate_schema(minimal(p), p).ok


@pytest.mark.parametrize("changes,path", [
    ({"metadata": {"color": "red"}}, "metadata.color"),
    ({"metadata": {"priority": "urgent"}}, "metadata.priority"),
    ({"timing": TimingFields(4, 0)}, "timing.bucket"),
    ({"tool_call": ToolCall("report", {"priority": "high"})}, "tool_call.args.status"),
    ({"tool_call": ToolCall("report", {"priority": 1, "status": "open"})}, "tool_call.args.priority"),
    ({"tool_call": ToolCall("report", {"priority": "high", "status": "open", "pad": ""})}, "tool_call.args.pad"),
])
def test_schema_violation_paths(changes, path):
    p = report_policy()
    v = validate_schema(minimal(p, **changes), p)
    assert not v.ok and v.path == path


def test_bind_input_permutations():
    a = {"task_id": "t1", "queue": "q3", "family": "decision"}
    digests = {bind_input(dict(perm)) for perm in itertools.permutations(a.items())}
    assert len(digests) == 1
    assert bind_input({**a, "queue": "q4"}) not in digests
    assert bind_input({}) == digest(b"{}")
    with pytest.raises(UnsupportedValue):
        bind_input({"x": float("nan")})


def test_envelope_round_trip(multi_catalog):
    p = multi_catalog.policy
    ctx = SeedContext.from_label("env-rt")
    for t, task in enumerate(multi_catalog.tasks):
        rand = derive_randomness(ctx, ZERO_DIGEST, t)
        env = build_envelope(task, encode_honest(task, rand), rand, p)
        data = env.to_bytes()
        back = Envelope.from_bytes(data)
        assert back == env and back.to_bytes() == data
        assert validate_schema(back, p).ok
        assert canonicalize(back.to_value()).bytes == data


def test_malformed_envelopes():
    with pytest.raises(EnvelopeFormatError):
        Envelope.from_bytes(b'{"message":"x"}')
    with pytest.raises(EnvelopeFormatError):
        Envelope.from_bytes(b"not json")


def test_policy_file_round_trip(tmp_path):
    p = desk_policy()
    path = tmp_path / "policy.json"
    h = save_policy(path, p)
    assert load_policy(path).policy_hash == h == p.policy_hash
    path.write_bytes(path.read_bytes().replace(b'"timing_buckets":4', b'"timing_buckets":5'))
    with pytest.raises(PolicyError):
        load_policy(path)


def test_policy_rejects_negative_budget():
    with pytest.raises(PolicyError):
        desk_policy(residual_budgets={"time": -1.0, "tool": 0.0, "token": 0.0, "env": 0.0})
