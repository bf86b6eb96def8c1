import hashlib

import pytest

from clbc.canonical import ZERO_DIGEST, canonicalize
from clbc.catalog import (
    FAMILY_M_RANGE,
    Catalog,
    HiddenState,
    Rendered,
    encode_colluding,
    encode_honest,
    generate_catalog,
    load_catalog,
    make_task,
    render,
    save_catalog,
    score_utility,
)
from clbc.colluder import AttackStrategy
from clbc.envelope import LatentObject, ToolCall
from clbc.errors import BadWeights, UnknownIntent
from clbc.randomness import PublicRandomness


def rand_with_lead(n, turn=0):
    return PublicRandomness(n.to_bytes(8, "big") + bytes(24), turn, ZERO_DIGEST)


def task_of(utilities, intent="report_status"):
    slots = [{"priority": p, "status": s} for p in ("high", "low", "medium") for s in ("open", "revise")]
    return make_task("fx", "decision", {"task_id": "fx"}, [(intent, slots[i]) for i in range(len(utilities))],
                     utilities)


def test_single_option():
    task = task_of([0.8])
    assert encode_honest(task, rand_with_lead(12345)) == task.options[0]


def test_two_tied_residue_one():
    task = task_of([0.9, 0.9])
    assert encode_honest(task, rand_with_lead(1)) == task.options[1]
    assert encode_honest(task, rand_with_lead(2)) == task.options[0]


def test_tie_among_argmax_only():
    task = make_task("fx", "decision", {}, [("report_status", {"priority": "high", "status": "open"}),
                                            ("report_status", {"priority": "high", "status": "revise"}),
                                            ("report_status", {"priority": "low", "status": "open"})],
                     [0.9, 0.4, 0.9])
    assert task.argmax_indices == (0, 2)
    picks = {encode_honest(task, rand_with_lead(k)).option_index for k in range(6)}
    assert picks == {0, 2}


def test_honest_ignores_hidden_state():
    # the honest encoder takes no hidden argument at all
    import inspect
    assert list(inspect.signature(encode_honest).parameters) == ["task", "rand"]


def test_colluding_identity_affine_hash():
    task = task_of([0.9] * 5)
    r = rand_with_lead(0)
    assert encode_colluding(task, r, HiddenState(1, (0.5, 0.5)), AttackStrategy.make("identity")) == task.options[1]
    assert encode_colluding(task, r, 2, AttackStrategy.make("affine", a=3, b=1)).option_index == 2
    nonce = 4
    h = hashlib.sha256((3).to_bytes(8, "big") + nonce.to_bytes(8, "big")).digest()
    expected = int.from_bytes(h[:8], "big") % 5
    assert encode_colluding(task, r, 3, AttackStrategy.make("hash_bucket", nonce=nonce)).option_index == expected


def test_colluding_never_out_of_range():
    task = task_of([0.9] * 3)
    for s in range(20):
        idx = encode_colluding(task, rand_with_lead(s), s, AttackStrategy.make("affine", a=7, b=5)).option_index
        assert 0 <= idx < 3


def test_render_report_record():
    latent = LatentObject("report_status", {"status": "revise", "priority": "high"}, 0)
    out = render(latent, rand_with_lead(0))
    assert canonicalize(out.metadata).bytes == b'{"action":"report","priority":"high","status":"revise"}'
    assert out.message == "report: priority=high, status=revise"
    assert out.tool_call == ToolCall("report", {"priority": "high", "status": "revise"})


def test_render_deterministic_and_injective(catalog):
    r = rand_with_lead(99, turn=3)
    for task in catalog.tasks:
        messages = [render(o, r, catalog.policy).message for o in task.options]
        assert messages == [render(o, r, catalog.policy).message for o in task.options]
        assert len(set(messages)) == len(messages)
    with pytest.raises(UnknownIntent):
        render(LatentObject("shout_status", {}, 0), r)


def test_score_utility_examples():
    task = task_of([1.0, 0.5])
    good = task.options[0]
    assert score_utility(task, good) == pytest.approx(1.0)
    assert score_utility(task, task.options[1]) == pytest.approx(0.7)
    r = render(task.options[1], rand_with_lead(0))
    broken = Rendered(r.message, {**r.metadata, "color": "red"}, r.tool_call, r.env_actions, r.timing)
    assert score_utility(task, task.options[1], rendered=broken) == pytest.approx(0.5)
    with pytest.raises(BadWeights):
        score_utility(task, good, (0.5, 0.5, 0.5))


def test_hidden_state_prior():
    with pytest.raises(ValueError):
        HiddenState(0, (0.5, 0.6))
    assert HiddenState(1, (0.25,) * 4).K == 4


def test_generator_ranges_and_determinism(policy, tmp_path):
    a = generate_catalog(3, n_tasks=60, policy=policy)
    assert a.digest() == generate_catalog(3, n_tasks=60, policy=policy).digest()
    for task in a.tasks:
        lo, hi = FAMILY_M_RANGE[task.family]
        assert lo <= task.option_count <= hi
    save_catalog(tmp_path / "c.json", a)
    assert load_catalog(tmp_path / "c.json", policy).digest() == a.digest()


def test_options_sorted_canonically(catalog):
    for task in catalog.tasks:
        keys = [o.content_key() for o in task.options]
        assert keys == sorted(keys)
