import pytest

from clbc.catalog import desk_policy, generate_catalog, make_task, Catalog
from clbc.lanes import DEFAULT_EPOCH, DEFAULT_RECEIPT_KEY, seed_context_for
from clbc.verifier import ProofSettings, Verifier


@pytest.fixture(scope="session")
def policy():
    return desk_policy()


@pytest.fixture(scope="session")
def catalog(policy):
    return generate_catalog(5, policy=policy)


@pytest.fixture(scope="session")
def multi_catalog(policy):
    # every task has at least two options
    return generate_catalog(7, m_range=(2, 4), policy=policy)


def equal_options_catalog(M, K=None, n_tasks=1, policy=None, catalog_id=None):
    """Tasks with M equal-utility options each (for exact-MI fixtures)."""
    policy = policy or desk_policy()
    contents = [("report_status", {"priority": p, "status": s})
                for p in ("high", "low", "medium") for s in ("done", "open", "revise")][:M]
    tasks = tuple(
        make_task(f"eq{M}-{i}", "decision", {"task_id": f"eq{M}-{i}", "family": "decision", "queue": "q0"},
                  contents, [0.9] * M)
        for i in range(n_tasks)
    )
    return Catalog(catalog_id or f"eq-{M}", tasks, K or M, policy)


def fresh_verifier(catalog, seed=0, proof_settings=None, profile="honest_enforcing"):
    return Verifier(catalog.policy, seed_context_for(catalog, seed), proof_settings or ProofSettings(),
                    catalog.registry, {DEFAULT_EPOCH: DEFAULT_RECEIPT_KEY}, profile)


# -- evaluation runs -----------------------------------------------------------------------

SMALL_CONFIG = dict(strict_turns=200, robustness_turns=100, attack_eval_turns=100,
                    baseline_turns=120, baseline_screen_turns=60)


def start_run(root, thresholds=None, attack=None, config=None, catalog_seeds=(11, 12)):
    """init_run on fresh seeded catalogs; ``config=None`` gives the small fast config."""
    from clbc.colluder import AttackConfig
    from clbc.pipeline import DEFAULT_THRESHOLDS, RunConfig, init_run

    policy = desk_policy()
    cats = [generate_catalog(s, policy=policy) for s in catalog_seeds]
    if config is None:
        config = RunConfig(**SMALL_CONFIG)
        attack = attack or AttackConfig(turns_per_eval=60)
    return init_run(root, policy, cats, thresholds or DEFAULT_THRESHOLDS, attack or AttackConfig(), config)


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """One complete default-configuration run, shared read-only; copy before mutating."""
    from clbc.pipeline import RunConfig, run_all

    root = tmp_path_factory.mktemp("full-run")
    start_run(root, config=RunConfig())
    summary = run_all(root)
    return root, summary


# -- acceptance report lines ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``record(n, title, ok, detail)`` prints and keeps one verdict line per criterion."""
    def record(n, title, ok, detail):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
