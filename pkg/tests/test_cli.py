import json
from pathlib import Path

import pytest
import yaml

from prolific.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main
from prolific.output import read_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_classify_prints_profile(capsys):
    code, cap = run(capsys, "classify", "--config", CONFIGS / "quadratic.yaml")
    assert code == EXIT_OK
    assert "lambda_star" in cap.out


def test_classify_neveu_banner(capsys):
    code, cap = run(capsys, "classify", "--config", CONFIGS / "neveu.yaml")
    assert code == EXIT_OK and "CSBP-only" in cap.out


def test_explosive_is_refused_by_simulate(capsys, tmp_path):
    code, cap = run(capsys, "simulate", "--config", CONFIGS / "explosive.yaml", "--replicates", 10, "--out", tmp_path)
    assert code == EXIT_FAIL and "rejected" in cap.err


def test_solve_writes_curves_and_identities(capsys, tmp_path):
    code, cap = run(capsys, "solve", "--config", CONFIGS / "stable.yaml", "--out", tmp_path)
    assert code == EXIT_OK, cap.out
    meta, rows = read_csv(tmp_path / "curves.csv")
    assert meta["seed"] == "11" and len(meta["config_hash"]) == 16
    assert {r["kind"] for r in rows} >= {"u", "u_star", "w", "survival_bar"}
    _, ident = read_csv(tmp_path / "identities.csv")
    assert all(r["pass"] == "True" for r in ident)
    assert (tmp_path / "curves.png").exists()


def test_simulate_outputs_and_seed_override(capsys, tmp_path):
    code, cap = run(capsys, "simulate", "--config", CONFIGS / "quadratic.yaml", "--replicates", 3000, "--seed", 42, "--out", tmp_path)
    assert code == EXIT_OK
    meta, rows = read_csv(tmp_path / "estimates.csv")
    assert meta["seed"] == "42" and rows
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["replicates"] == 3000 and doc["provenance"]["seed"] == 42
    assert (tmp_path / "summary.csv").exists()


def test_simulate_is_reproducible(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d, threads in ((a, 1), (b, 2)):
        assert run(capsys, "simulate", "--config", CONFIGS / "quadratic.yaml", "--replicates", 3000, "--out", d, "--threads", threads)[0] == EXIT_OK
    assert (a / "estimates.csv").read_text() == (b / "estimates.csv").read_text()


def test_report_renders_figures(capsys, tmp_path):
    code, cap = run(capsys, "report", "--config", CONFIGS / "quadratic.yaml", "--replicates", 2000, "--out", tmp_path)
    assert code in (EXIT_OK, EXIT_FAIL)
    for name in ("curves.png", "estimates.png", "mass.png", "curves.csv", "estimates.csv"):
        assert (tmp_path / name).stat().st_size > 0


def test_jsonl_logs(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    doc = yaml.safe_load((CONFIGS / "stable.yaml").read_text())
    doc["output"]["formats"] = ["csv", "jsonl"]
    cfg.write_text(yaml.safe_dump(doc))
    assert run(capsys, "simulate", "--config", cfg, "--replicates", 200, "--out", tmp_path)[0] == EXIT_OK
    for name in ("tree.jsonl", "events.jsonl"):
        first = json.loads((tmp_path / name).read_text().splitlines()[0])
        assert first["provenance"]["seed"] == 11


def test_verify_suite_subset(capsys, tmp_path):
    code, cap = run(capsys, "verify", "--criteria", "1,2", "--out", tmp_path)
    assert code == EXIT_OK
    assert "[PASS] criterion 1" in cap.out and "[PASS] criterion 2" in cap.out
    assert (tmp_path / "acceptance.csv").exists()


def test_bad_inputs(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mechanism:\n  family: quadratic\n  a: 1\n  b: 1\n  d: 2\n")
    code, cap = run(capsys, "classify", "--config", bad)
    assert code == EXIT_INPUT and ":5:" in cap.err
    assert run(capsys, "simulate")[0] == EXIT_INPUT
    assert run(capsys, "classify", "--config", tmp_path / "missing.yaml")[0] == EXIT_INPUT
    negative = tmp_path / "neg.yaml"
    negative.write_text("mechanism:\n  family: quadratic\n  a: -1\n  b: 1\n")
    assert run(capsys, "classify", "--config", negative)[0] == EXIT_FAIL
    with pytest.raises(SystemExit):
        main(["simulate", "--config", str(CONFIGS / "quadratic.yaml"), "--replicates", "0"])
