"""``clbc`` command line.

Catalog directories hold ``policy.json`` (plus its ``.digest``) and one
``catalog-<id>.json`` per catalog, as written by ``clbc gen-catalogs``.
Pipeline commands keep their artifacts under ``--root`` or, when that is
omitted, under ``$CLBC_ARTIFACT_ROOT``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .canonical import canonicalize, decode
from .catalog import FAMILIES, desk_policy, generate_catalog, load_catalog, save_catalog
from .colluder import AttackConfig, check_nondegeneracy, search
from .envelope import load_policy, read_envelope_log, save_policy, write_envelope_log
from .errors import ClbcError, PipelineFailure
from .lanes import DEFAULT_EPOCH, DEFAULT_RECEIPT_KEY, LADDER, run_lane
from .pipeline import (
    DEFAULT_THRESHOLDS,
    STAGES,
    LaneObjective,
    RunConfig,
    baseline_sweep,
    emit_report,
    init_run,
    run_stage,
)
from .randomness import SeedContext
from .verifier import (
    LatentProfile,
    ProofSettings,
    Verifier,
    read_transcript,
    state_from_records,
    write_rejections,
    write_transcript,
)


def _load_dir(path: str):
    d = Path(path)
    policy = load_policy(d / "policy.json")
    catalogs = [load_catalog(p, policy) for p in sorted(d.glob("catalog-*.json"))]
    if not catalogs:
        raise ClbcError(f"no catalog-*.json files in {d}")
    return policy, catalogs


def _emit(value) -> None:
    sys.stdout.write(canonicalize(value).text() + "\n")


def cmd_gen_catalogs(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = desk_policy()
    save_policy(out / "policy.json", policy)
    m_range = (a.m_min, a.m_max) if a.m_min is not None else None
    index = {}
    catalogs = []
    for seed in a.seeds:
        cat = generate_catalog(seed, a.n_tasks, tuple(a.families), a.K, m_range, a.tie_rate, policy=policy)
        index[cat.catalog_id] = save_catalog(out / f"catalog-{cat.catalog_id}.json", cat).hex()
        catalogs.append(cat)
    if a.candidates:
        lane = run_lane(catalogs[0], "clbc_full", 0, a.candidates)
        write_envelope_log(out / "candidates.log", [r.admitted_bytes for r in lane.records])
    _emit({"policy_hash": policy.policy_hash.hex(), "catalogs": index})
    return 0


def cmd_admit(a) -> int:
    policy = load_policy(a.policy)
    tasks = {}
    if a.catalogs:
        for cat in _load_dir(a.catalogs)[1]:
            tasks.update(cat.registry)
    tdir = Path(a.transcript)
    tdir.mkdir(parents=True, exist_ok=True)
    log = tdir / "transcript.log"
    state = state_from_records(read_transcript(log)) if log.exists() else None
    if state is not None and not state.verify_log():
        raise ClbcError(f"{log} does not replay to a consistent chain")
    settings = ProofSettings("strict", 1) if a.cadence == 1 else ProofSettings("sampled", a.cadence)
    verifier = Verifier(policy, SeedContext.from_label(a.seed_label, DEFAULT_EPOCH), settings, tasks,
                        {DEFAULT_EPOCH: DEFAULT_RECEIPT_KEY}, LatentProfile(a.latent_profile), state=state)
    verdicts = [verifier.submit(c) for c in read_envelope_log(a.infile)]
    write_transcript(log, verifier.state)
    write_rejections(tdir / "rejections.log", verifier.state)
    counts: dict[str, int] = {}
    for v in verdicts:
        counts[v.reason.value] = counts.get(v.reason.value, 0) + 1
    _emit({"submitted": len(verdicts), "reasons": counts, "head": verifier.state.head.hex(),
           "turns": verifier.state.turn_index})
    return 0


def cmd_attack(a) -> int:
    _, catalogs = _load_dir(a.catalogs)
    cfg = AttackConfig.load(a.config) if a.config else AttackConfig()
    obj = LaneObjective(cfg.target_class, cfg.turns_per_eval)
    trace = search(catalogs, cfg.objective, cfg.budget, obj.leakage, obj.utility)
    trace.write_log(a.out)
    gates = check_nondegeneracy(trace, cfg.gates)
    _emit({"best": None if trace.best is None else trace.best.to_value(), "gates": gates.to_value(),
           "train_steps": trace.train_steps, "strategy_count": trace.strategy_count,
           "parameter_delta_norm": trace.parameter_delta_norm})
    return 0 if gates.passed else 1


def cmd_baselines(a) -> int:
    _, catalogs = _load_dir(a.catalogs)
    sweep = baseline_sweep(catalogs, tuple(a.classes), tuple(range(a.seeds)), a.turns, a.screen_turns)
    data = canonicalize(sweep).bytes + b"\n"
    if a.out:
        Path(a.out).write_bytes(data)
    rows = [(c, r["utility"], r["advantage"], r["exact_success"]) for c, r in sweep["classes"].items()]
    print(f"{'class':<12} {'utility':>8} {'dec.adv':>8} {'exact':>8}")
    for c, u, adv, ex in rows:
        print(f"{c:<12} {u:8.3f} {adv:8.3f} {ex:8.3f}")
    print(f"gap(raw - clbc_full) = {sweep['gap']:.3f}   ladder monotonic: {sweep['ladder_monotonic']}")
    return 0


def cmd_audit(a) -> int:
    from .audit import AuditEpoch, VERIFIER_VERSION, respond_and_verify, select_challenges
    from .verifier import MOCK_MECHANISM

    policy = load_policy(a.policy)
    log = read_transcript(Path(a.transcript) / "transcript.log")
    heads = [r.link.link for r in log]
    if a.heads:
        from .canonical import Digest

        heads = [Digest.fromhex(line.strip()) for line in Path(a.heads).read_text().splitlines() if line.strip()]
    ctx = SeedContext.from_label(a.seed_label, DEFAULT_EPOCH)
    epoch = AuditEpoch(DEFAULT_EPOCH, policy.policy_hash, VERIFIER_VERSION, (MOCK_MECHANISM,),
                       a.m / max(len(log), 1) if log else 1.0, a.cadence, ctx.commitment())
    indices = select_challenges(len(log), a.challenge_seed, a.m)
    verdict = respond_and_verify(log, indices, epoch, heads)
    _emit(verdict.to_value())
    return 0 if verdict.passed else 1


def cmd_evaluate(a) -> int:
    root = a.root
    if a.stage:
        result = run_stage(a.stage, root)
        _emit({"stage": a.stage, "outputs": result.outputs})
        return 0
    policy, catalogs = _load_dir(a.catalogs)
    thresholds = decode(Path(a.thresholds).read_bytes().strip()) if a.thresholds else DEFAULT_THRESHOLDS
    attack = AttackConfig.load(a.attack_config) if a.attack_config else AttackConfig()
    config = RunConfig(seeds=tuple(range(a.seeds)))
    manifest = init_run(root, policy, catalogs, thresholds, attack, config)
    summary = None
    for stage in STAGES:
        summary = run_stage(stage, root).summary
        print(f"stage {stage}: done", file=sys.stderr)
    print(f"run {manifest.run_id}: {summary['verdict']}")
    for row in summary["rows"]:
        print(f"  {row['metric']:<24} {float(row['value']):9.4f} {row['op']} {float(row['threshold']):7.4f}"
              f"  margin {float(row['margin']):+.4f}")
    for reason in summary["reasons"]:
        print(f"  FAIL {reason}")
    return 0 if summary["verdict"] == "PASS" else 1


def cmd_report(a) -> int:
    digests = emit_report(a.root, a.out)
    _emit(digests)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clbc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-catalogs", help="write a policy and seeded synthetic catalogs")
    g.add_argument("--out", required=True)
    g.add_argument("--seeds", type=int, nargs="+", default=[11, 12])
    g.add_argument("--n-tasks", type=int, default=24)
    g.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES)
    g.add_argument("--K", type=int, default=2)
    g.add_argument("--m-min", type=int)
    g.add_argument("--m-max", type=int)
    g.add_argument("--tie-rate", type=float, default=0.06)
    g.add_argument("--candidates", type=int, default=0, help="also write N honest candidates for the first catalog")
    g.set_defaults(func=cmd_gen_catalogs)

    ad = sub.add_parser("admit", help="run candidates through full admission")
    ad.add_argument("--policy", required=True)
    ad.add_argument("--transcript", required=True, help="directory for transcript.log and rejections.log")
    ad.add_argument("--in", dest="infile", required=True, help="one hex envelope per line")
    ad.add_argument("--catalogs", help="catalog directory providing the task registry")
    ad.add_argument("--seed-label", default="desk-11/seed-0")
    ad.add_argument("--cadence", type=int, default=1)
    ad.add_argument("--latent-profile", default="honest_enforcing", choices=[p.value for p in LatentProfile])
    ad.set_defaults(func=cmd_admit)

    at = sub.add_parser("attack", help="run the colluder search and write its trace log")
    at.add_argument("--catalogs", required=True)
    at.add_argument("--config")
    at.add_argument("--out", required=True)
    at.set_defaults(func=cmd_attack)

    b = sub.add_parser("baselines", help="baseline ladder sweep")
    b.add_argument("--catalogs", required=True)
    b.add_argument("--classes", nargs="+", default=list(LADDER), choices=LADDER)
    b.add_argument("--seeds", type=int, default=7)
    b.add_argument("--turns", type=int, default=400)
    b.add_argument("--screen-turns", type=int, default=160)
    b.add_argument("--out")
    b.set_defaults(func=cmd_baselines)

    au = sub.add_parser("audit", help="seeded challenge audit of a transcript")
    au.add_argument("--transcript", required=True)
    au.add_argument("--policy", required=True)
    au.add_argument("--m", type=int, default=10)
    au.add_argument("--challenge-seed", type=int, default=0)
    au.add_argument("--seed-label", default="desk-11/seed-0")
    au.add_argument("--cadence", type=int, default=1)
    au.add_argument("--heads", help="published chain heads, one hex digest per line")
    au.set_defaults(func=cmd_audit)

    e = sub.add_parser("evaluate", help="staged evaluation against a threshold file")
    e.add_argument("--thresholds")
    e.add_argument("--catalogs", help="catalog directory (required unless --stage)")
    e.add_argument("--attack-config")
    e.add_argument("--seeds", type=int, default=7)
    e.add_argument("--root")
    e.add_argument("--stage", choices=STAGES, help="run a single stage against an existing manifest")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="emit the report bundle of a finished run")
    r.add_argument("--root")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "evaluate" and not args.stage and not args.catalogs:
        build_parser().error("evaluate needs --catalogs unless --stage is given")
    try:
        return args.func(args)
    except PipelineFailure as exc:
        print(f"FAILED {exc.reason}: {exc}", file=sys.stderr)
        return 2
    except (ClbcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
