import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA
from pmcrossover import io
from pmcrossover.cli import main
from pmcrossover.patterns import GroupingScheme, tabulate
from pmcrossover.simulate import barge_like, simulate_dataset

REPORT_KEYS = {
    "analysis", "method", "grouping", "cell_labels", "data", "pattern_counts", "proportions",
    "group_effects", "pooled_means", "contrast", "covariance", "convergence", "warnings",
}


def _csv(tmp_path, body, name="d.csv"):
    path = tmp_path / name
    path.write_text("pair_id,sequence,y_1A,y_1B,y_2A,y_2B\n" + body)
    return path


def test_parse_examples(tmp_path):
    ds = io.parse_csv(_csv(tmp_path, "7,1,310.5,,295.0,301.2\n8,2,NA,NA,NA,NA\n"))
    assert len(ds.records) == 1
    rec = ds.records[0]
    assert rec.pattern == 2 and rec.y == (310.5, None, 295.0, 301.2)
    assert ds.rejected == [{"line": 3, "pair_id": "8", "reason": "all values missing"}]
    assert ds.n_all_missing == 1 and ds.n_malformed == 0


def test_parse_rejections(tmp_path):
    ds = io.parse_csv(_csv(tmp_path, "1,1,1,2,3,4\n1,2,1,2,3,4\n2,3,1,2,3,4\n3,1,x,2,3,4\n4,1,1,2\n"))
    reasons = [r["reason"] for r in ds.rejected]
    assert len(ds.records) == 1
    assert reasons[0] == "duplicate pair_id"
    assert "sequence" in reasons[1] and "non-numeric" in reasons[2] and "fields" in reasons[3]


def test_parse_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.parse_csv(tmp_path / "nope.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("id,seq,a,b,c,d\n1,1,1,1,1,1\n")
    with pytest.raises(io.MalformedHeader):
        io.parse_csv(bad)


def test_forty_pair_counts_file():
    ds = io.parse_csv(DATA / "forty_pairs.csv")
    counts = tabulate(ds.records)
    assert counts.by_pattern() == {0: 29, 1: 1, 2: 1, 3: 0, 4: 3, 5: 2, 6: 1, 7: 3, 8: 0, 9: 0, 10: 0, 11: 0, 12: 0, 13: 0, 14: 0}
    assert counts.by_group == {"C": 29, "D": 6, "P": 5} and counts.total == 40


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_csv_round_trip(tmp_path_factory, seed):
    recs = simulate_dataset(barge_like(n_pairs=60, seed=seed))
    path = tmp_path_factory.mktemp("rt") / "sim.csv"
    io.write_csv(recs, path)
    back = io.parse_csv(path).records
    assert [(int(r.pair_id), r.sequence, r.y) for r in back] == [(r.pair_id, r.sequence, r.y) for r in recs]


def test_dumps_17_digits():
    text = io.dumps({"a": 0.1, "b": [1.0 / 3, float("nan")], "c": np.float64(2.5e-20), "d": True})
    data = json.loads(text)
    assert data["a"] == 0.1 and data["b"][0] == 1.0 / 3 and data["b"][1] is None
    assert "0.33333333333333331" in text and "0.10000000000000001" in text
    assert data["c"] == 2.5e-20 and data["d"] is True


# ---------------------------------------------------------------- CLI


@pytest.fixture
def sim_csv(tmp_path):
    path = tmp_path / "sim.csv"
    io.write_csv(simulate_dataset(barge_like(n_pairs=200, seed=3)), path)
    return path


def test_fit_reml_default(sim_csv, tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["fit", "--input", str(sim_csv), "--method", "reml", "--grouping", "default", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert set(rep) == REPORT_KEYS
    assert rep["analysis"] == "pattern-mixture" and rep["method"] == "REML"
    assert set(rep["group_effects"]) == {"C", "D", "P"}
    assert rep["pattern_counts"]["total"] == 200
    assert set(rep["contrast"]) == {"c", "estimate", "se", "z", "p_two_sided", "ci_95"}
    assert rep["convergence"]["converged"] is True


def test_fit_naive_and_merged(sim_csv, capsys):
    assert main(["fit", "--input", str(sim_csv), "--naive"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["analysis"] == "pattern-ignoring" and list(rep["group_effects"]) == ["ALL"]
    assert main(["fit", "--input", str(sim_csv), "--grouping", "merged-dp", "--method", "ml"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert list(rep["group_effects"]) == ["C", "D+P"] and rep["method"] == "ML"


def test_fit_contrast_and_config(sim_csv, tmp_path, capsys):
    grouping = tmp_path / "g.toml"
    grouping.write_text('[grouping]\nC = [0, 10, 11, 12]\n"D+P" = [1, 2, 3, 6, 7, 13, 14, 4, 5, 8, 9]\n')
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        f'input = "{sim_csv}"\nmethod = "ml"\ngrouping = "{grouping}"\n'
        '[labels]\ntype_1 = "R"\ntype_2 = "G"\ntreatment_A = "Albuterol"\ntreatment_B = "Placebo"\n'
    )
    assert main(["fit", "--config", str(cfg), "--method", "reml", "--contrast", "1,-1,0,0"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["method"] == "REML"  # flag beats file
    assert list(rep["group_effects"]) == ["C", "D+P"]
    assert rep["contrast"]["c"] == [1, -1, 0, 0]
    assert rep["cell_labels"]["1B"] == "R/Placebo"


def test_fit_exit_codes(tmp_path, sim_csv, capsys):
    assert main(["fit", "--input", str(tmp_path / "missing.csv")]) == 1
    bad = _csv(tmp_path, "1,1,1,2,3,x\n2,1,1,2,3,4\n", "bad.csv")
    assert main(["fit", "--input", str(bad)]) == 1
    hdr = tmp_path / "hdr.csv"
    hdr.write_text("a,b\n")
    assert main(["fit", "--input", str(hdr)]) == 1
    cfg = tmp_path / "c.toml"
    cfg.write_text("[optimizer]\nmax_iter = 1\n")
    assert main(["fit", "--input", str(sim_csv), "--config", str(cfg)]) == 2
    cfg.write_text('method = "bayes"\n')
    assert main(["fit", "--input", str(sim_csv), "--config", str(cfg)]) == 1
    capsys.readouterr()


def test_simulate_smoke_and_determinism(tmp_path):
    a, b, c = (tmp_path / f"{k}.json" for k in "abc")
    args = ["simulate", "--scenario", "barge-like", "--reps", "10", "--seed", "5"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert main(args + ["--out", str(c), "--threads", "2"]) == 0
    rep = json.loads(a.read_text())
    assert rep["replicates"] == 10 and rep["failures"] <= 1
    assert a.read_bytes() == b.read_bytes() == c.read_bytes()


def test_simulate_config_scenario(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text(
        "reps = 2\n[scenario]\nn_pairs = 60\nseed = 3\nsigma = [[4,1,0,0],[1,4,0,0],[0,0,4,1],[0,0,1,4]]\n"
        '[scenario.groups.C]\nprob = 1.0\neffects = [1,2,3,4,0,0,0,0]\npatterns = [[0,1,0.5],[0,2,0.5]]\n'
    )
    data = tmp_path / "one.csv"
    assert main(["simulate", "--config", str(cfg), "--dataset-out", str(data)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["truth"]["mu_2B"] == 4 and rep["n_pairs"] == 60
    assert len(io.parse_csv(data).records) == 60
    cfg.write_text("[scenario]\n[scenario.groups.C]\nprob = 0.5\neffects = [1,2,3,4,0,0,0,0]\npatterns = [[0,1,1.0]]\n")
    assert main(["simulate", "--config", str(cfg)]) == 1


def test_patterns_command(capsys):
    assert main(["patterns"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 30
    row = next(l for l in lines[1:] if l.split()[:2] == ["2", "1"])
    assert "X    ?    X    X" in row and row.split()[-1] == "D"
    assert main(["patterns", "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert sorted({r["pattern"] for r in rows}) == list(range(15))


def test_validate_command(tmp_path, capsys):
    assert main(["validate", "--input", str(DATA / "forty_pairs.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["by_group"] == {"C": 29, "D": 6, "P": 5}
    bad = _csv(tmp_path, "1,1,1,2,3,4\n2,9,1,2,3,4\n")
    assert main(["validate", "--input", str(bad)]) == 1
    capsys.readouterr()


def test_grouping_loader(tmp_path):
    assert io.load_grouping("merged-dp").labels == ("C", "D+P")
    f = tmp_path / "g.toml"
    f.write_text("[grouping]\nA = [0]\n")
    with pytest.raises(io.ConfigError):
        io.load_grouping(str(f))
