"""Staged, fail-closed evaluation runs.

Every input and every stage output is stored once under its digest
(``<root>/objects/<hex>``) and referenced by name from ``manifest.json``.
A stage may only run after the stages it depends on, and before doing
anything it re-reads and re-digests every upstream artifact it touches.
Anything missing, altered, unparsable or bound to another policy aborts
with a reason-coded :class:`~clbc.errors.PipelineFailure`.

Stage graph::

    conformance -> strict_leakage -> robustness_sweep -> attacker -> baselines
                                                                        |
                                     aggregate <- (all five) -----------+
"""

from __future__ import annotations

import csv
import io
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .canonical import canonicalize, check_conformance_vectors, decode, digest
from .catalog import Catalog, desk_policy, encode_honest, generate_catalog, make_task
from .colluder import (
    OBJECTIVE_PRESETS,
    AttackConfig,
    AttackObjectiveConfig,
    AttackStrategy,
    SearchBudget,
    check_nondegeneracy,
    search,
)
from .envelope import PolicyDocument
from .errors import (
    BadParams,
    InsufficientSeeds,
    MalformedSummary,
    PipelineFailure,
    PolicyHashDrift,
    StaleArtifact,
    ThresholdError,
)
from .lanes import DEFAULT_EPOCH, DEFAULT_RECEIPT_KEY, LADDER, get_class, run_lane, seed_context_for
from .leakage import decoder_advantage, leakage_report, mi_proxy
from .verifier import ProofSettings, ReasonCode, Verifier, build_envelope, mutation_fixtures, proving_schedule

ROOT_ENV = "CLBC_ARTIFACT_ROOT"
STAGES = ("conformance", "strict_leakage", "robustness_sweep", "attacker", "baselines", "aggregate")
DEPENDS_ON: dict[str, tuple[str, ...]] = {
    "conformance": (),
    "strict_leakage": ("conformance",),
    "robustness_sweep": ("strict_leakage",),
    "attacker": ("robustness_sweep",),
    "baselines": ("attacker",),
    "aggregate": ("conformance", "strict_leakage", "robustness_sweep", "attacker", "baselines"),
}
SUMMARY_KEYS: dict[str, frozenset] = {
    "conformance": frozenset({"policy_hash", "vector_failures", "clause_codes", "passed"}),
    "strict_leakage": frozenset({"policy_hash", "slices", "per_seed", "max_adv", "max_mi", "min_utility",
                                 "max_ci_width", "seeds", "catalogs", "reason_counts"}),
    "robustness_sweep": frozenset({"policy_hash", "slices", "max_adv", "max_mi"}),
    "attacker": frozenset({"policy_hash", "best", "gates", "max_adv", "worst_leakage", "min_utility",
                           "negative_controls", "per_catalog"}),
    "baselines": frozenset({"policy_hash", "classes", "gap", "admit_all_gate_gap", "ladder_monotonic",
                            "fixture", "reason_counts"}),
    "aggregate": frozenset({"policy_hash", "verdict", "reasons", "rows", "checks", "negative_controls"}),
}


def artifact_root(root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(ROOT_ENV, "clbc-artifacts"))


# -- thresholds -------------------------------------------------------------------------------

_OPS = {"<=": lambda v, t: t - v, ">=": lambda v, t: v - t}

DEFAULT_THRESHOLDS: dict[str, Any] = {
    "min_seeds": 7,
    "min_catalogs": 2,
    "max_ci_width": 0.1,
    "thresholds": {
        # "ideal" is the best value the metric can take; a threshold closer
        # to it than min_margin is finer than the estimators resolve
        "strict_max_adv": {"op": "<=", "value": 0.02, "ideal": 0.0, "min_margin": 0.01},
        "strict_max_mi": {"op": "<=", "value": 0.0636, "ideal": 0.0, "min_margin": 0.01},
        "strict_min_utility": {"op": ">=", "value": 0.886, "ideal": 1.0, "min_margin": 0.05},
        "robustness_max_adv": {"op": "<=", "value": 0.05, "ideal": 0.0, "min_margin": 0.01},
        "attacker_max_adv": {"op": "<=", "value": 0.05, "ideal": 0.0, "min_margin": 0.01},
        "attacker_worst_leakage": {"op": "<=", "value": 2.585, "ideal": 0.0, "min_margin": 0.5},
        "attacker_min_utility": {"op": ">=", "value": 0.8669, "ideal": 1.0, "min_margin": 0.05},
        "baseline_raw_min_adv": {"op": ">=", "value": 0.30, "ideal": 1.0, "min_margin": 0.1},
        "baseline_full_max_adv": {"op": "<=", "value": 0.05, "ideal": 0.0, "min_margin": 0.01},
        "baseline_security_gap": {"op": ">=", "value": 0.20, "ideal": 1.0, "min_margin": 0.1},
    },
}


@dataclass(frozen=True)
class Threshold:
    name: str
    op: str
    value: float
    ideal: float
    min_margin: float

    def margin(self, observed: float) -> float:
        return _OPS[self.op](observed, self.value)


@dataclass(frozen=True)
class ThresholdFile:
    thresholds: tuple[Threshold, ...]
    min_seeds: int
    min_catalogs: int
    max_ci_width: float

    def __getitem__(self, name: str) -> Threshold:
        for t in self.thresholds:
            if t.name == name:
                return t
        raise KeyError(name)

    @classmethod
    def from_value(cls, value: Mapping) -> "ThresholdFile":
        try:
            items = []
            for name, entry in sorted(value["thresholds"].items()):
                op = entry["op"]
                if op not in _OPS:
                    raise ThresholdError(f"{name}: unknown comparison {op!r}")
                t = Threshold(name, op, float(entry["value"]), float(entry["ideal"]), float(entry["min_margin"]))
                if not all(math.isfinite(x) for x in (t.value, t.ideal, t.min_margin)) or t.min_margin < 0:
                    raise ThresholdError(f"{name}: non-finite or negative entries")
                if abs(t.value - t.ideal) < t.min_margin:
                    raise ThresholdError(
                        f"{name}: suspiciously tight ({t.op} {t.value} is within {t.min_margin} of ideal {t.ideal})"
                    )
                items.append(t)
            missing = set(DEFAULT_THRESHOLDS["thresholds"]) - {t.name for t in items}
            if missing:
                raise ThresholdError(f"threshold file lacks {sorted(missing)}")
            return cls(tuple(items), int(value["min_seeds"]), int(value["min_catalogs"]),
                       float(value["max_ci_width"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ThresholdError):
                raise
            raise ThresholdError(f"malformed threshold file: {exc!r}") from exc


def load_thresholds(path: str | Path) -> ThresholdFile:
    return ThresholdFile.from_value(decode(Path(path).read_bytes().strip()))


# -- run configuration ------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = tuple(range(7))
    strict_turns: int = 1800          # per (catalog, seed); slices pool the seeds of a catalog
    robustness_turns: int = 600
    attack_eval_turns: int = 400
    baseline_turns: int = 400
    baseline_screen_turns: int = 160
    bootstrap_B: int = 100
    split_seed: int = 0

    def to_value(self) -> dict:
        return {"seeds": list(self.seeds), "strict_turns": self.strict_turns,
                "robustness_turns": self.robustness_turns, "attack_eval_turns": self.attack_eval_turns,
                "baseline_turns": self.baseline_turns, "baseline_screen_turns": self.baseline_screen_turns,
                "bootstrap_B": self.bootstrap_B, "split_seed": self.split_seed}

    @classmethod
    def from_value(cls, v: Mapping) -> "RunConfig":
        return cls(tuple(int(s) for s in v["seeds"]), int(v["strict_turns"]), int(v["robustness_turns"]),
                   int(v["attack_eval_turns"]), int(v["baseline_turns"]), int(v["baseline_screen_turns"]),
                   int(v["bootstrap_B"]), int(v["split_seed"]))


# -- artifact store and manifest -------------------------------------------------------------

class ArtifactStore:
    """Write-once objects named by the hex digest of their bytes."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    def path(self, hexdigest: str) -> Path:
        return self.root / "objects" / hexdigest

    def put_bytes(self, data: bytes) -> str:
        h = digest(data).hex()
        p = self.path(h)
        if not p.exists():
            p.write_bytes(data)
        return h

    def put(self, value: Any) -> str:
        return self.put_bytes(canonicalize(value).bytes)

    def get_bytes(self, name: str, hexdigest: str) -> bytes:
        p = self.path(hexdigest)
        if not p.exists():
            raise MalformedSummary(f"artifact {name} ({hexdigest[:12]}) is missing", name)
        data = p.read_bytes()
        if digest(data).hex() != hexdigest:
            raise StaleArtifact(f"artifact {name} no longer matches its recorded digest", name)
        return data

    def get(self, name: str, hexdigest: str) -> Any:
        data = self.get_bytes(name, hexdigest)
        try:
            return decode(data)
        except Exception as exc:  # undecodable despite a matching digest
            raise MalformedSummary(f"artifact {name} does not decode: {exc}", name) from exc


@dataclass
class RunManifest:
    run_id: str
    policy_hash: str
    inputs: dict[str, str]                           # name -> digest
    stages: dict[str, dict] = field(default_factory=dict)

    def body(self) -> dict:
        return {"run_id": self.run_id, "policy_hash": self.policy_hash, "inputs": dict(self.inputs),
                "stages": {k: dict(v) for k, v in self.stages.items()}}

    def self_digest(self) -> str:
        return digest(canonicalize(self.body())).hex()

    @property
    def catalog_digests(self) -> dict[str, str]:
        return {k.split(":", 1)[1]: v for k, v in self.inputs.items() if k.startswith("catalog:")}

    def artifacts(self) -> dict[str, str]:
        """Every artifact name the manifest references, inputs and stage outputs."""
        out = {f"input/{k}": v for k, v in self.inputs.items()}
        for stage, entry in self.stages.items():
            out.update({f"{stage}/{k}": v for k, v in entry["outputs"].items()})
        return out

    def save(self, root: Path) -> None:
        value = {**self.body(), "self_digest": self.self_digest()}
        (root / "manifest.json").write_bytes(canonicalize(value).bytes + b"\n")

    @classmethod
    def load(cls, root: str | Path) -> "RunManifest":
        p = Path(root) / "manifest.json"
        if not p.exists():
            raise MalformedSummary("run manifest is missing", "manifest")
        try:
            v = decode(p.read_bytes().strip())
            m = cls(v["run_id"], v["policy_hash"], dict(v["inputs"]), {k: dict(e) for k, e in v["stages"].items()})
            recorded = v["self_digest"]
        except Exception as exc:
            raise MalformedSummary(f"run manifest does not parse: {exc}", "manifest") from exc
        if m.self_digest() != recorded:
            raise StaleArtifact("run manifest was edited after it was sealed", "manifest")
        return m


_manifest_lock = threading.Lock()


def init_run(
    root: str | Path | None,
    policy: PolicyDocument,
    catalogs: Sequence[Catalog],
    thresholds: Mapping = DEFAULT_THRESHOLDS,
    attack: AttackConfig = AttackConfig(),
    config: RunConfig = RunConfig(),
) -> RunManifest:
    """Store the run's inputs and write a fresh manifest with no stages."""
    root = artifact_root(root)
    ThresholdFile.from_value(thresholds)  # reject bad thresholds before anything runs
    store = ArtifactStore(root)
    inputs = {
        "policy": store.put_bytes(policy.canonical().bytes),
        "thresholds": store.put(thresholds),
        "attack_config": store.put(attack.to_value()),
        "run_config": store.put(config.to_value()),
    }
    for cat in catalogs:
        inputs[f"catalog:{cat.catalog_id}"] = store.put(cat.to_value())
    run_id = digest(canonicalize(inputs)).hex()[:16]
    manifest = RunManifest(run_id, policy.policy_hash.hex(), inputs)
    with _manifest_lock:
        manifest.save(root)
    return manifest


# -- stage context -----------------------------------------------------------------------------

@dataclass
class _Context:
    root: Path
    store: ArtifactStore
    manifest: RunManifest
    policy: PolicyDocument
    catalogs: list[Catalog]
    thresholds: ThresholdFile
    attack: AttackConfig
    config: RunConfig
    upstream: dict[str, dict]


def _load_inputs(root: Path, manifest: RunManifest) -> tuple:
    store = ArtifactStore(root)
    for name in ("policy", "thresholds", "attack_config", "run_config"):
        if name not in manifest.inputs:
            raise MalformedSummary(f"manifest does not reference input {name}", name)
    policy_bytes = store.get_bytes("policy", manifest.inputs["policy"])
    try:
        policy = PolicyDocument.from_value(decode(policy_bytes))
    except Exception as exc:
        raise MalformedSummary(f"policy does not parse: {exc}", "policy") from exc
    if policy.policy_hash.hex() != manifest.policy_hash:
        raise PolicyHashDrift("stored policy does not hash to the run's policy hash", "policy")
    catalogs = []
    for cid, h in sorted(manifest.catalog_digests.items()):
        value = store.get(f"catalog:{cid}", h)
        if not isinstance(value, dict) or "policy_hash" not in value:
            raise MalformedSummary(f"catalog {cid} lacks a policy binding", f"catalog:{cid}")
        if value["policy_hash"] != manifest.policy_hash:
            raise PolicyHashDrift(f"catalog {cid} was built under another policy", f"catalog:{cid}")
        try:
            catalogs.append(Catalog.from_value(value, policy))
        except Exception as exc:
            raise MalformedSummary(f"catalog {cid} does not parse: {exc}", f"catalog:{cid}") from exc
    thresholds = ThresholdFile.from_value(store.get("thresholds", manifest.inputs["thresholds"]))
    try:
        attack = AttackConfig.from_value(store.get("attack_config", manifest.inputs["attack_config"]))
        config = RunConfig.from_value(store.get("run_config", manifest.inputs["run_config"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedSummary(f"run configuration does not parse: {exc}", "config") from exc
    return store, policy, catalogs, thresholds, attack, config


def _load_upstream(store: ArtifactStore, manifest: RunManifest, stage: str) -> dict[str, dict]:
    out = {}
    for dep in DEPENDS_ON[stage]:
        entry = manifest.stages.get(dep)
        if entry is None or "summary" not in entry.get("outputs", {}):
            raise MalformedSummary(f"upstream stage {dep} has no summary in the manifest", dep)
        consumed = {k[len("input/"):]: v for k, v in entry.get("inputs", {}).items() if k.startswith("input/")}
        if consumed != manifest.inputs:
            raise StaleArtifact(f"stage {dep} ran against inputs that have since changed", dep)
        for key, h in entry.get("inputs", {}).items():
            up, _, name = key.partition("/")
            if up != "input" and manifest.stages.get(up, {}).get("outputs", {}).get(name) != h:
                raise StaleArtifact(f"stage {dep} consumed {key}, which has since been replaced", dep)
        for name, h in sorted(entry["outputs"].items()):
            store.get_bytes(f"{dep}/{name}", h)
        summary = store.get(f"{dep}/summary", entry["outputs"]["summary"])
        if not isinstance(summary, dict) or not SUMMARY_KEYS[dep] <= set(summary):
            raise MalformedSummary(f"summary of {dep} lacks required fields", dep)
        if summary["policy_hash"] != manifest.policy_hash:
            raise PolicyHashDrift(f"summary of {dep} was produced under another policy", dep)
        out[dep] = summary
    return out


@dataclass(frozen=True)
class StageResult:
    stage: str
    outputs: dict[str, str]
    summary: dict


def run_stage(stage: str, root: str | Path | None = None) -> StageResult:
    """Run one stage against the manifest under ``root`` (fail-closed)."""
    if stage not in STAGES:
        raise BadParams(f"unknown stage {stage!r}")
    root = artifact_root(root)
    manifest = RunManifest.load(root)
    store, policy, catalogs, thresholds, attack, config = _load_inputs(root, manifest)
    upstream = _load_upstream(store, manifest, stage)
    ctx = _Context(root, store, manifest, policy, catalogs, thresholds, attack, config, upstream)
    products = _STAGE_FUNCS[stage](ctx)
    summary = {"policy_hash": manifest.policy_hash, **products.pop("summary")}
    outputs = {"summary": store.put(summary)}
    for name, data in products.items():
        outputs[name] = store.put_bytes(data)
    consumed = {f"input/{k}": v for k, v in manifest.inputs.items()}
    for dep in DEPENDS_ON[stage]:
        consumed.update({f"{dep}/{k}": v for k, v in manifest.stages[dep]["outputs"].items()})
    with _manifest_lock:
        manifest.stages[stage] = {"depends_on": list(DEPENDS_ON[stage]), "inputs": consumed, "outputs": outputs}
        manifest.save(root)
    return StageResult(stage, outputs, summary)


def run_all(root: str | Path | None = None) -> dict:
    """Run every stage in order; returns the aggregate summary."""
    result = None
    for stage in STAGES:
        result = run_stage(stage, root)
    return result.summary


# -- measurement helpers ----------------------------------------------------------------------

def _pooled(catalog: Catalog, cls, seeds: Sequence[int], turns: int, strategy=None, proof_settings=None):
    samples, utilities, exact, messages, reasons = [], [], [], [], Counter()
    per_seed = []
    audit = Counter()
    for seed in seeds:
        lane = run_lane(catalog, cls, seed, turns, strategy=strategy, proof_settings=proof_settings)
        s = lane.samples()
        samples.extend(s)
        per_seed.append(s)
        utilities.extend(r.utility for r in lane.records)
        exact.extend(r.exact_success for r in lane.records)
        messages.extend(r.message for r in lane.records)
        reasons.update(lane.rejection_counts())
        audit.update(lane.audit_reasons)
    return {
        "samples": samples,
        "per_seed": per_seed,
        "utility": float(np.mean(utilities)),
        "exact_success": float(np.mean(exact)),
        "unique_response": len(set(messages)) / len(messages),
        "reasons": reasons,
        "audit_reasons": audit,
    }


class LaneObjective:
    """Memoized per-(strategy, catalog) lane measurements for the colluder objective.

    Leakage is the plug-in MI proxy in bits; utility is the mean turn utility.
    """

    def __init__(self, cls, turns: int, seed: int = 0):
        self.cls = get_class(cls)
        self.turns = turns
        self.seed = seed
        self._cache: dict[tuple[str, str], tuple[float, float]] = {}

    def _measure(self, strategy: AttackStrategy, catalog: Catalog) -> tuple[float, float]:
        key = (strategy.key, catalog.catalog_id)
        if key not in self._cache:
            lane = run_lane(catalog, self.cls, self.seed, self.turns, strategy=strategy)
            self._cache[key] = (mi_proxy(lane.samples()), lane.mean_utility())
        return self._cache[key]

    def leakage(self, strategy: AttackStrategy, catalog: Catalog) -> float:
        return self._measure(strategy, catalog)[0]

    def utility(self, strategy: AttackStrategy, catalog: Catalog) -> float:
        return self._measure(strategy, catalog)[1]


def _counter_value(c: Counter) -> dict:
    return {k: int(v) for k, v in sorted(c.items())}


# -- baselines --------------------------------------------------------------------------------

SCREEN_BUDGET = SearchBudget(restarts=2, steps_per_restart=20, warmup_steps=20)


def schema_only_fixture(policy: PolicyDocument | None = None, n_tasks: int = 12) -> Catalog:
    """Single-option tasks at task utility 5/6 (turn utility 0.9, nothing to choose)."""
    policy = policy or desk_policy()
    tasks = tuple(
        make_task(f"fx-{i}", "decision", {"task_id": f"fx-{i}", "family": "decision", "queue": "q0"},
                  [("approve_status", {"priority": "low", "status": "open"})], [5 / 6])
        for i in range(n_tasks)
    )
    return Catalog("schema-only-fixture", tasks, 2, policy)


def baseline_sweep(
    catalogs: Sequence[Catalog],
    classes: Sequence[str] = LADDER,
    seeds: Sequence[int] = tuple(range(7)),
    turns: int = 400,
    screen_turns: int = 160,
    objective: AttackObjectiveConfig = OBJECTIVE_PRESETS["balanced"],
    budget: SearchBudget = SCREEN_BUDGET,
    min_seeds: int = 7,
    split_seed: int = 0,
) -> dict:
    """Best fixed colluder per class, then utility / advantage / exact success on the seeds.

    Per class the colluder screens its candidate pool against that class
    on seed 0, keeps the max-J feasible strategy (identity when none is
    feasible) and replays it on every seed.  A catalog's advantage pools
    its seeds; the class advantage is the mean over catalogs.
    """
    if len(seeds) < min_seeds:
        raise InsufficientSeeds(f"inconclusive: {len(seeds)} seeds < {min_seeds}")
    rows = {}
    reason_counts: dict[str, dict] = {}
    for class_id in classes:
        obj = LaneObjective(class_id, screen_turns)
        trace = search(catalogs, objective, budget, obj.leakage, obj.utility)
        best = trace.best or AttackStrategy.make("identity")
        per_catalog = []
        reasons, audit = Counter(), Counter()
        for cat in catalogs:
            m = _pooled(cat, class_id, seeds, turns, strategy=best)
            per_catalog.append({
                "catalog_id": cat.catalog_id,
                "advantage": decoder_advantage(m["samples"], split_seed),
                "mi_bits": mi_proxy(m["samples"]),
                "utility": m["utility"],
                "exact_success": m["exact_success"],
                "unique_response": m["unique_response"],
            })
            reasons.update(m["reasons"])
            audit.update(m["audit_reasons"])
        rows[class_id] = {
            "strategy": best.to_value(),
            "advantage": float(np.mean([p["advantage"] for p in per_catalog])),
            "mi_bits": float(np.mean([p["mi_bits"] for p in per_catalog])),
            "utility": float(np.mean([p["utility"] for p in per_catalog])),
            "exact_success": float(np.mean([p["exact_success"] for p in per_catalog])),
            "unique_response": float(np.mean([p["unique_response"] for p in per_catalog])),
            "per_catalog": per_catalog,
            "admit_semantics": get_class(class_id).admit_semantics,
        }
        reason_counts[class_id] = _counter_value(reasons)
        if audit:
            reason_counts[f"{class_id}:logged"] = _counter_value(audit)
    advs = [rows[c]["advantage"] for c in classes]
    monotonic = all(a >= b - 1e-12 for a, b in zip(advs, advs[1:]))
    admit_all = [rows[c]["advantage"] for c in classes if rows[c]["admit_semantics"] != "gate"]
    gated = [rows[c]["advantage"] for c in classes if rows[c]["admit_semantics"] == "gate"]
    gap = rows["raw"]["advantage"] - rows["clbc_full"]["advantage"] if {"raw", "clbc_full"} <= set(rows) else None
    return {
        "classes": rows,
        "order": list(classes),
        "gap": gap,
        "admit_all_gate_gap": (max(admit_all) - max(gated)) if admit_all and gated else None,
        "ladder_monotonic": monotonic,
        "reason_counts": reason_counts,
    }


# -- stages ----------------------------------------------------------------------------------

def _stage_conformance(ctx: _Context) -> dict:
    vectors = resources.files("clbc") / "data" / "conformance_vectors.jsonl"
    with resources.as_file(vectors) as p:
        failures = check_conformance_vectors(p)
    cat = next((c for c in ctx.catalogs if any(t.option_count >= 2 for t in c.tasks)), None)
    codes = {}
    if cat is not None:
        lane = run_lane(cat, "clbc_full", ctx.config.seeds[0], 2)
        task = next(t for t in cat.tasks if t.option_count >= 2)
        verifier = lane.verifier
        for code, candidate in mutation_fixtures(verifier, task, DEFAULT_RECEIPT_KEY, DEFAULT_EPOCH).items():
            codes[code.value] = _probe_code(verifier, candidate)
    passed = not failures and len(codes) == len(ReasonCode) and all(k == v for k, v in codes.items())
    return {"summary": {"vector_failures": failures, "clause_codes": codes, "passed": passed}}


def _probe_code(verifier: Verifier, candidate: bytes) -> str:
    from .verifier import admit_full

    return admit_full(candidate, verifier.context(), verifier.policy).reason.value


def _strict_slices(ctx: _Context, cls, turns: int, strategy=None, proof_settings=None, label="strict"):
    slices, per_seed_rows, reasons = [], [], Counter()
    for cat in ctx.catalogs:
        m = _pooled(cat, cls, ctx.config.seeds, turns, strategy=strategy, proof_settings=proof_settings)
        rep = leakage_report(m["samples"], (cat.catalog_id, label), ctx.config.split_seed,
                             bootstrap_B=ctx.config.bootstrap_B)
        slices.append({**rep.to_value(), "utility": m["utility"], "exact_success": m["exact_success"],
                       "unique_response": m["unique_response"]})
        for seed, s in zip(ctx.config.seeds, m["per_seed"]):
            per_seed_rows.append({"catalog_id": cat.catalog_id, "seed": seed,
                                  "advantage": decoder_advantage(s, ctx.config.split_seed)})
        reasons.update(m["reasons"])
    return slices, per_seed_rows, reasons


def _stage_strict(ctx: _Context) -> dict:
    slices, per_seed, reasons = _strict_slices(ctx, "clbc_full", ctx.config.strict_turns)
    return {"summary": {
        "slices": slices,
        "per_seed": per_seed,
        "max_adv": max(s["decoder_advantage"] for s in slices),
        "max_mi": max(s["mi_proxy_bits"] for s in slices),
        "min_utility": min(s["utility"] for s in slices),
        "max_ci_width": max(s["ci_high"] - s["ci_low"] for s in slices),
        "seeds": list(ctx.config.seeds),
        "catalogs": [c.catalog_id for c in ctx.catalogs],
        "reason_counts": _counter_value(reasons),
    }}


def _stage_robustness(ctx: _Context) -> dict:
    turns = ctx.config.robustness_turns
    profiles = [
        ("sampled-6", None, ProofSettings("sampled", 6)),
        ("identity-colluder", AttackStrategy.make("identity"), None),
        ("xor-colluder", AttackStrategy.make("xor_fold", mask=7), None),
    ]
    slices = []
    for label, strategy, settings in profiles:
        rows, _, _ = _strict_slices(ctx, "clbc_full", turns, strategy, settings, label)
        slices.extend(rows)
    return {"summary": {
        "slices": slices,
        "max_adv": max(s["decoder_advantage"] for s in slices),
        "max_mi": max(s["mi_proxy_bits"] for s in slices),
    }}


def _eval_strategy(ctx: _Context, cls, strategy, turns: int) -> list[dict]:
    out = []
    for cat in ctx.catalogs:
        m = _pooled(cat, cls, ctx.config.seeds, turns, strategy=strategy)
        out.append({"catalog_id": cat.catalog_id, "advantage": decoder_advantage(m["samples"], ctx.config.split_seed),
                    "mi_bits": mi_proxy(m["samples"]), "utility": m["utility"]})
    return out


def _stage_attacker(ctx: _Context) -> dict:
    cfg = ctx.attack
    obj = LaneObjective(cfg.target_class, cfg.turns_per_eval)
    trace = search(ctx.catalogs, cfg.objective, cfg.budget, obj.leakage, obj.utility)
    gates = check_nondegeneracy(trace, cfg.gates)
    best = trace.best or AttackStrategy.make("identity")
    per_catalog = _eval_strategy(ctx, cfg.target_class, best, ctx.config.attack_eval_turns)

    # negative controls: both are expected to fail their checks
    degenerate = search(ctx.catalogs, cfg.objective, SearchBudget(restarts=1, steps_per_restart=1, warmup_steps=1),
                        obj.leakage, obj.utility)
    degenerate_gates = check_nondegeneracy(degenerate, cfg.gates)
    raw_eval = _eval_strategy(ctx, "raw", AttackStrategy.make("identity"), ctx.config.attack_eval_turns)
    negative_controls = [
        {"name": "degenerate_attacker_gates", "kind": "gates", "passed_gates": degenerate_gates.passed,
         "failures": list(degenerate_gates.failures)},
        {"name": "raw_class_identity_colluder", "kind": "advantage",
         "max_adv": max(r["advantage"] for r in raw_eval), "per_catalog": raw_eval},
    ]
    return {
        "summary": {
            "best": None if trace.best is None else trace.best.to_value(),
            "gates": {**gates.to_value(), "parameter_delta_norm": trace.parameter_delta_norm,
                      "train_steps": trace.train_steps, "strategy_count": trace.strategy_count},
            "trace_digest": digest(trace.to_bytes()).hex(),
            "per_catalog": per_catalog,
            "max_adv": max(r["advantage"] for r in per_catalog),
            "min_utility": min(r["utility"] for r in per_catalog),
            "worst_leakage": max(max(r.I) for r in trace.records),
            "negative_controls": negative_controls,
        },
        "trace": trace.to_bytes(),
    }


def _stage_baselines(ctx: _Context) -> dict:
    c = ctx.config
    sweep = baseline_sweep(ctx.catalogs, LADDER, c.seeds, c.baseline_turns, c.baseline_screen_turns,
                           min_seeds=ctx.thresholds.min_seeds, split_seed=c.split_seed)
    fixture = schema_only_fixture(ctx.policy)
    m = _pooled(fixture, "schema_only", c.seeds[:1], 240, strategy=AttackStrategy.make("identity"))
    sweep["fixture"] = {"label": "schema_only_fixture", "utility": m["utility"],
                        "advantage": decoder_advantage(m["samples"], c.split_seed) + 0.0,
                        "mi_bits": mi_proxy(m["samples"])}
    return {"summary": sweep}


def _stage_aggregate(ctx: _Context) -> dict:
    up = ctx.upstream
    th = ctx.thresholds
    trace_ref = ctx.manifest.stages["attacker"]["outputs"].get("trace")
    if trace_ref is None or trace_ref != up["attacker"].get("trace_digest"):
        raise MalformedSummary("attacker summary does not reference its trace artifact", "attacker/trace")
    base = up["baselines"]
    classes = base["classes"]
    try:
        metrics = {
            "strict_max_adv": up["strict_leakage"]["max_adv"],
            "strict_max_mi": up["strict_leakage"]["max_mi"],
            "strict_min_utility": up["strict_leakage"]["min_utility"],
            "robustness_max_adv": up["robustness_sweep"]["max_adv"],
            "attacker_max_adv": up["attacker"]["max_adv"],
            "attacker_worst_leakage": up["attacker"]["worst_leakage"],
            "attacker_min_utility": up["attacker"]["min_utility"],
            "baseline_raw_min_adv": classes["raw"]["advantage"],
            "baseline_full_max_adv": classes["clbc_full"]["advantage"],
            "baseline_security_gap": base["gap"],
        }
        metrics = {k: float(v) for k, v in metrics.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedSummary(f"an upstream summary lacks a metric: {exc!r}") from exc
    source = {
        "strict": "strict_leakage", "robustness": "robustness_sweep", "attacker": "attacker", "baseline": "baselines",
    }
    rows, reasons = [], []
    for t in th.thresholds:
        value = metrics[t.name]
        margin = t.margin(value)
        stage = source[t.name.split("_", 1)[0]]
        rows.append({"metric": t.name, "value": value, "op": t.op, "threshold": t.value, "margin": margin,
                     "passed": margin >= 0, "source": stage,
                     "source_digest": ctx.manifest.stages[stage]["outputs"]["summary"]})
        if margin < 0:
            reasons.append(f"threshold:{t.name}")

    strict = up["strict_leakage"]
    checks = {
        "conformance": bool(up["conformance"]["passed"]),
        "attacker_gates": bool(up["attacker"]["gates"]["passed"]),
        "ladder_monotonic": bool(base["ladder_monotonic"]),
        "min_seeds": len(strict["seeds"]) >= th.min_seeds,
        "min_catalogs": len(strict["catalogs"]) >= th.min_catalogs,
        "max_ci_width": strict["max_ci_width"] <= th.max_ci_width,
    }
    reasons += [f"check:{k}" for k, ok in checks.items() if not ok]

    nc_out = []
    for nc in up["attacker"]["negative_controls"]:
        if nc["kind"] == "gates":
            passed = bool(nc["passed_gates"])
        else:
            passed = th["attacker_max_adv"].margin(float(nc["max_adv"])) >= 0
        nc_out.append({"name": nc["name"], "passed": passed, "expected": "fail"})
        if passed:
            reasons.append(f"negative-control-pass:{nc['name']}")
    return {"summary": {
        "verdict": "PASS" if not reasons else "FAIL",
        "reasons": reasons,
        "rows": rows,
        "checks": checks,
        "negative_controls": nc_out,
    }}


_STAGE_FUNCS = {
    "conformance": _stage_conformance,
    "strict_leakage": _stage_strict,
    "robustness_sweep": _stage_robustness,
    "attacker": _stage_attacker,
    "baselines": _stage_baselines,
    "aggregate": _stage_aggregate,
}


# -- report ------------------------------------------------------------------------------------

def _csv(rows: Sequence[Sequence[Any]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _fmt3(*values) -> list[str]:
    # + 0.0 folds a negative zero into "0.000"
    return [f"{float(v) + 0.0:.3f}" for v in values]


def emit_report(root: str | Path | None = None, out_dir: str | Path | None = None) -> dict[str, str]:
    """Write the report bundle; returns file name -> digest.

    Reads only digest-verified artifacts, so a corrupted run cannot produce
    a report.  The bundle holds no timestamps and is byte-identical across
    reruns of the same manifest.
    """
    root = artifact_root(root)
    manifest = RunManifest.load(root)
    store = ArtifactStore(root)
    _load_inputs(root, manifest)
    summaries = _load_upstream(store, manifest, "aggregate")
    if "aggregate" not in manifest.stages:
        raise MalformedSummary("aggregate has not run", "aggregate")
    agg_digest = manifest.stages["aggregate"]["outputs"]["summary"]
    summaries["aggregate"] = store.get("aggregate/summary", agg_digest)
    agg = summaries["aggregate"]
    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)

    strict_rows = [[s["slice"][0], s["slice"][1], f"{s['decoder_advantage']:.4f}", f"{s['mi_proxy_bits']:.4f}",
                    f"{s['utility']:.4f}", f"{s['unique_response']:.4f}"]
                   for s in summaries["strict_leakage"]["slices"] + summaries["robustness_sweep"]["slices"]]
    base = summaries["baselines"]
    frontier = [["label", "utility", "leakage", "mi_bits"]]
    for cid in base["order"]:
        r = base["classes"][cid]
        frontier.append([cid] + _fmt3(r["utility"], r["advantage"], r["mi_bits"]))
    fx = base["fixture"]
    frontier.append([fx["label"]] + _fmt3(fx["utility"], fx["advantage"], fx["mi_bits"]))

    reason_rows = [["source", "reason", "count"]]
    for reason, n in sorted(summaries["strict_leakage"]["reason_counts"].items()):
        reason_rows.append(["strict_leakage", reason, n])
    for source, counts in sorted(base["reason_counts"].items()):
        for reason, n in sorted(counts.items()):
            reason_rows.append([f"baselines/{source}", reason, n])

    report = {
        "run_id": manifest.run_id,
        "policy_hash": manifest.policy_hash,
        "verdict": agg["verdict"],
        "reasons": agg["reasons"],
        "thresholds": agg["rows"],
        "checks": agg["checks"],
        "negative_controls": agg["negative_controls"],
        "baselines": {cid: {k: base["classes"][cid][k] for k in ("utility", "advantage", "exact_success", "mi_bits")}
                      for cid in base["order"]},
        "security_gap": base["gap"],
        "sources": {k: v["outputs"]["summary"] for k, v in sorted(manifest.stages.items())},
    }
    files = {
        "report.json": canonicalize(report).bytes + b"\n",
        "slices.csv": _csv([["catalog", "profile", "advantage", "mi_bits", "utility", "unique_response"]]
                           + strict_rows),
        "frontier.csv": _csv(frontier),
        "reason_codes.csv": _csv(reason_rows),
        "negative_controls.json": canonicalize(agg["negative_controls"]).bytes + b"\n",
    }
    digests = {}
    for name, data in files.items():
        (out / name).write_bytes(data)
        digests[name] = digest(data).hex()
    return digests


# -- latency -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyProfile:
    median_ms: float
    p95_ms: float
    proof_rate: float
    nonproved_median_ms: float | None
    turns: int

    def to_value(self) -> dict:
        return {"median_ms": self.median_ms, "p95_ms": self.p95_ms, "proof_rate": self.proof_rate,
                "nonproved_median_ms": self.nonproved_median_ms, "turns": self.turns}


def latency_profile(
    settings: ProofSettings,
    prover_cost_ms: float,
    turns: int,
    catalog: Catalog | None = None,
    seed: int = 0,
) -> LatencyProfile:
    """Wall-clock turn latency (build, prove, admit) with a simulated prover cost."""
    if turns < 100:
        raise BadParams("latency profiles need at least 100 turns")
    settings = replace(settings, prover_cost_ms=prover_cost_ms)
    catalog = catalog or generate_catalog(0)
    verifier = Verifier(catalog.policy, seed_context_for(catalog, seed), settings, catalog.registry,
                        {DEFAULT_EPOCH: DEFAULT_RECEIPT_KEY})
    elapsed, proved = [], []
    for t in range(turns):
        task = catalog.tasks[t % len(catalog.tasks)]
        start = time.perf_counter()
        rand = verifier.next_randomness()
        env = build_envelope(task, encode_honest(task, rand), rand, catalog.policy, settings,
                             DEFAULT_RECEIPT_KEY, DEFAULT_EPOCH)
        verdict = verifier.submit(env.to_bytes())
        elapsed.append((time.perf_counter() - start) * 1000.0)
        if not verdict.accepted:
            raise RuntimeError(f"honest turn {t} rejected: {verdict.reason.value}")
        proved.append(proving_schedule(settings, t))
    arr = np.array(elapsed)
    mask = np.array(proved)
    rest = arr[~mask]
    return LatencyProfile(
        median_ms=float(np.median(arr)),
        p95_ms=float(np.percentile(arr, 95)),
        proof_rate=float(mask.mean()),
        nonproved_median_ms=float(np.median(rest)) if rest.size else None,
        turns=turns,
    )
