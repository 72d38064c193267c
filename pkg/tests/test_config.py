from pathlib import Path

import pytest

from prolific.config import ConfigError, load_config, parse_config, save_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.mechanism.family in path.read_text()


def test_round_trip_preserves_digest(tmp_path):
    cfg = load_config(CONFIGS / "stable.yaml")
    again = load_config(save_config(cfg, tmp_path / "c.yaml"))
    assert again == cfg and again.digest() == cfg.digest()


def test_digest_ignores_comments_and_order():
    a = parse_config("mechanism:\n  family: quadratic\n  a: 1.0\n  b: 2.0\n")
    b = parse_config("# note\nmechanism: {b: 2.0, a: 1.0, family: quadratic}\n")
    assert a.digest() == b.digest()
    c = parse_config("mechanism:\n  family: quadratic\n  a: 1.0\n  b: 3.0\n")
    assert a.digest() != c.digest()


def test_unknown_key_reports_line():
    text = "mechanism:\n  family: quadratic\n  a: 1.0\n  b: 1.0\nscenario:\n  replicats: 10\n"
    with pytest.raises(ConfigError, match=r"<config>:6: scenario\.replicats"):
        parse_config(text)


@pytest.mark.parametrize("text,needle", [
    ("mechanism:\n  family: stable\n  a: 1.0\n", "needs parameters"),
    ("mechanism:\n  family: neveu\n  a: 1.0\n", "does not take"),
    ("mechanism:\n  family: quadratic\n  a: 1\n  b: 1\nscenario:\n  checkpoints: [0.5, 0.2]\n", "increasing"),
    ("mechanism:\n  family: quadratic\n  a: 1\n  b: 1\nscenario:\n  replicates: 0\n", "replicates"),
    ("mechanism: [1, 2]\n", "mechanism"),
    ("a: [\n", "YAML"),
])
def test_invalid_configs(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_scenario_overrides():
    cfg = load_config(CONFIGS / "quadratic.yaml")
    scn = cfg.to_scenario(seed=99, replicates=10)
    assert scn.seed == 99 and scn.replicates == 10
    assert cfg.to_scenario().replicates == cfg.scenario.replicates
    assert scn.resolved_scheme().is_exact
