import json
import subprocess
import sys

import pytest

from clbc.canonical import canonicalize
from clbc.cli import main
from clbc.pipeline import DEFAULT_THRESHOLDS, STAGES

from conftest import start_run


@pytest.fixture(scope="module")
def catalog_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cats")
    assert main(["gen-catalogs", "--out", str(out), "--seeds", "11", "12", "--candidates", "40"]) == 0
    return out


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_gen_catalogs(catalog_dir):
    names = sorted(p.name for p in catalog_dir.iterdir())
    assert names == ["candidates.log", "catalog-desk-11.json", "catalog-desk-12.json",
                     "policy.json", "policy.json.digest"]
    assert len((catalog_dir / "candidates.log").read_text().split()) == 40


def test_admit_then_audit(catalog_dir, tmp_path, capsys):
    tdir = tmp_path / "t"
    args = ["--policy", str(catalog_dir / "policy.json"), "--transcript", str(tdir)]
    assert main(["admit", *args, "--in", str(catalog_dir / "candidates.log"),
                 "--catalogs", str(catalog_dir), "--seed-label", "desk-11/seed-0"]) == 0
    out = last_json(capsys)
    assert out["reasons"] == {"ok": 40} and out["turns"] == 40
    assert main(["audit", *args, "--m", "10", "--seed-label", "desk-11/seed-0"]) == 0
    verdict = last_json(capsys)
    assert verdict["passed"] and len(verdict["outcomes"]) == 10

    # resubmitting the same candidates: stale chain position, nothing admitted
    assert main(["admit", *args, "--in", str(catalog_dir / "candidates.log"),
                 "--catalogs", str(catalog_dir), "--seed-label", "desk-11/seed-0"]) == 0
    again = last_json(capsys)
    assert again["turns"] == 40 and "ok" not in again["reasons"]


def test_attack(catalog_dir, tmp_path, capsys):
    from clbc.colluder import AttackConfig, SearchBudget

    cfg = tmp_path / "attack.json"
    AttackConfig(budget=SearchBudget(restarts=1, steps_per_restart=5, warmup_steps=5), turns_per_eval=40).save(cfg)
    code = main(["attack", "--catalogs", str(catalog_dir), "--config", str(cfg), "--out", str(tmp_path / "trace.log")])
    out = last_json(capsys)
    assert code == 1 and out["gates"]["passed"] is False  # tiny budget fails the gates
    assert (tmp_path / "trace.log").stat().st_size > 0


def test_baselines(catalog_dir, tmp_path, capsys):
    code = main(["baselines", "--catalogs", str(catalog_dir), "--classes", "raw", "clbc_full",
                 "--turns", "80", "--screen-turns", "40", "--out", str(tmp_path / "b.json")])
    assert code == 0
    text = capsys.readouterr().out
    assert "gap(raw - clbc_full)" in text
    assert (tmp_path / "b.json").exists()


def test_baselines_too_few_seeds(catalog_dir, capsys):
    assert main(["baselines", "--catalogs", str(catalog_dir), "--seeds", "3"]) == 2
    assert "inconclusive" in capsys.readouterr().err


def test_evaluate_stages_and_report(tmp_path, capsys):
    root = tmp_path / "run"
    start_run(root)
    for stage in STAGES:
        assert main(["evaluate", "--root", str(root), "--stage", stage]) == 0
    capsys.readouterr()
    assert main(["report", "--root", str(root), "--out", str(tmp_path / "rep")]) == 0
    assert set(last_json(capsys)) == {"report.json", "slices.csv", "frontier.csv", "reason_codes.csv",
                                      "negative_controls.json"}


def test_evaluate_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CLBC_ARTIFACT_ROOT", str(tmp_path))
    start_run(None)
    assert main(["evaluate", "--stage", "conformance"]) == 0


def test_evaluate_missing_upstream_exits_2(tmp_path, capsys):
    start_run(tmp_path)
    assert main(["evaluate", "--root", str(tmp_path), "--stage", "aggregate"]) == 2
    assert "malformed-summary" in capsys.readouterr().err


def test_evaluate_tight_thresholds_exit_2(catalog_dir, tmp_path, capsys):
    th = {**DEFAULT_THRESHOLDS, "thresholds": dict(DEFAULT_THRESHOLDS["thresholds"])}
    th["thresholds"]["strict_max_adv"] = {**th["thresholds"]["strict_max_adv"], "value": 0.001}
    path = tmp_path / "th.json"
    path.write_bytes(canonicalize(th).bytes)
    code = main(["evaluate", "--catalogs", str(catalog_dir), "--thresholds", str(path), "--root", str(tmp_path / "r")])
    assert code == 2
    assert "suspicious-threshold" in capsys.readouterr().err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "clbc.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-catalogs", "admit", "attack", "baselines", "audit", "evaluate", "report"):
        assert cmd in res.stdout
