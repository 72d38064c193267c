import json
import math

import numpy as np

from prolific import BranchingMechanism, __version__
from prolific.evolve import solve_u
from prolific.montecarlo import Scenario, estimate_laplace, simulate
from prolific.output import provenance, read_csv, write_csv, write_json, write_jsonl
from prolific.plotting import plot_curves, plot_estimates, plot_mass_histogram

META = provenance(5, "abc123")


def test_csv_round_trip(tmp_path):
    rows = [{"t": 0.5, "v": np.float64(1.25), "n": np.int64(3)}, {"t": 1.0, "v": math.nan, "n": 0}]
    meta, back = read_csv(write_csv(tmp_path / "a.csv", rows, ("t", "v", "n"), META))
    assert meta == {"seed": "5", "config_hash": "abc123", "version": __version__}
    assert back[0] == {"t": "0.5", "v": "1.25", "n": "3"}
    assert back[1]["v"] == ""


def test_json_handles_non_finite(tmp_path):
    path = write_json(tmp_path / "r.json", {"x": math.inf, "y": math.nan, "z": np.arange(2), "ok": np.bool_(True)}, META)
    doc = json.loads(path.read_text())
    assert doc["provenance"]["seed"] == 5
    assert doc["x"] == "inf" and doc["y"] is None and doc["z"] == [0, 1] and doc["ok"] is True


def test_jsonl_first_line_is_provenance(tmp_path):
    lines = write_jsonl(tmp_path / "e.jsonl", [{"a": 1}, {"a": 2}], META).read_text().splitlines()
    assert json.loads(lines[0]) == {"provenance": META}
    assert [json.loads(x)["a"] for x in lines[1:]] == [1, 2]


def test_figures_are_written(tmp_path):
    mech = BranchingMechanism.quadratic(1, 1)
    curves = [solve_u(mech, th, 1.0) for th in (0.5, 2.0)]
    out = simulate(Scenario(mech, replicates=2000, seed=1))
    reports = [estimate_laplace(out, th, t) for th in (0.5, 2.0) for t in (0.5, 1.0)]
    for path in (
        plot_curves(curves, tmp_path / "c.png", "caption"),
        plot_estimates(reports, tmp_path / "e.png", "caption"),
        plot_mass_histogram(out, tmp_path / "m.png", "caption"),
    ):
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
