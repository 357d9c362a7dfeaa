import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from meclink.cli import main
from meclink.comparison import PatternTable
from meclink.errors import DataError
from meclink.io import read_links, write_links, write_pattern_table, write_trace
from meclink.mec import MecSet
from meclink.simgen import GeneratorSpec
from meclink.simulation import parse_rule, run_study, summarize


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    rc = main(["simulate", "--reps", "1", "--na", "60", "--nb", "120", "--seed", "5",
               "--rules", "supervised", "--out-summary", str(out / "s.csv"),
               "--write-files", str(out / "files")])
    assert rc == 0
    return out / "files"


def _link(files, out, *extra):
    return main(["link", "--file-a", str(files / "file_a.csv"), "--file-b", str(files / "file_b.csv"),
                 "--schema", str(files / "schema.json"), "--out-links", str(out / "links.csv"),
                 "--out-metrics", str(out / "metrics.json"), "--no-timestamp", *extra])


def test_link_end_to_end(generated, tmp_path):
    assert _link(generated, tmp_path, "--target-flr", "0.05", "--out-trace", str(tmp_path / "t.csv"),
                 "--out-patterns", str(tmp_path / "p.csv")) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    for key in ("n_hat_m", "flr_hat", "mmr_hat", "entropy", "threshold", "iterations", "converged"):
        assert key in metrics
    assert metrics["flr_hat"] <= 0.05
    links = read_links(tmp_path / "links.csv")
    assert len(links) == metrics["size"]
    assert len({a for a, _ in links}) == len(links) == len({b for _, b in links})
    with open(tmp_path / "t.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["iteration", "n_M", "D"] and len(header) == 3 + 2 * 12
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(int(r["count"]) for r in rows) == metrics["n_a"] * metrics["n_b"]


def test_link_without_target_uses_rounded_count(generated, tmp_path):
    assert _link(generated, tmp_path) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["size"] == int(metrics["n_hat_m"] + 0.5)


def test_link_timestamp_flag(generated, tmp_path):
    main(["link", "--file-a", str(generated / "file_a.csv"), "--file-b", str(generated / "file_b.csv"),
          "--schema", str(generated / "schema.json"), "--out-links", str(tmp_path / "l.csv"),
          "--out-metrics", str(tmp_path / "m.json")])
    assert "timestamp" in json.loads((tmp_path / "m.json").read_text())


def test_link_missing_schema(generated, tmp_path, capsys):
    rc = main(["link", "--file-a", str(generated / "file_a.csv"), "--file-b", str(generated / "file_b.csv"),
               "--schema", str(tmp_path / "nope.json"), "--out-links", str(tmp_path / "l.csv")])
    assert rc == 3
    assert "nope.json" in capsys.readouterr().err


def test_link_empty_file(generated, tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text((generated / "file_b.csv").read_text().splitlines()[0] + "\n")
    rc = main(["link", "--file-a", str(generated / "file_a.csv"), "--file-b", str(empty),
               "--schema", str(generated / "schema.json"), "--out-links", str(tmp_path / "l.csv")])
    assert rc == 3
    assert "empty comparison space" in capsys.readouterr().err


def test_link_non_convergence_writes_outputs(generated, tmp_path):
    rc = _link(generated, tmp_path, "--max-iter", "1")
    assert rc == 4
    assert (tmp_path / "links.csv").exists() and (tmp_path / "metrics.json").exists()
    assert json.loads((tmp_path / "metrics.json").read_text())["converged"] is False


def _evaluate(tmp_path, links, truth):
    (tmp_path / "l.csv").write_text("a_id,b_id,pattern_bits,ratio,posterior\n"
                                    + "".join(f"{a},{b},1,1.0,1.0\n" for a, b in links))
    (tmp_path / "t.csv").write_text("a_id,b_id\n" + "".join(f"{a},{b}\n" for a, b in truth))
    assert main(["evaluate", "--links", str(tmp_path / "l.csv"), "--truth", str(tmp_path / "t.csv"),
                 "--out-metrics", str(tmp_path / "e.json"), "--no-timestamp"]) == 0
    return json.loads((tmp_path / "e.json").read_text())


def test_evaluate_examples(tmp_path):
    truth = [(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)]
    res = _evaluate(tmp_path, truth, truth)
    assert (res["flr"], res["mmr"]) == (0.0, 0.0)
    res = _evaluate(tmp_path, [], truth)
    assert (res["flr"], res["mmr"]) == (0.0, 1.0)
    # three of five links are true, and three of the five matches are found
    res = _evaluate(tmp_path, [(1, 1), (2, 2), (3, 3), (4, 5), (5, 4)], truth)
    assert res["flr"] == pytest.approx(2 / 5) and res["mmr"] == pytest.approx(2 / 5)
    res = _evaluate(tmp_path, [(1, 1), (2, 3)], truth)
    assert res["flr"] == pytest.approx(1 / 2) and res["mmr"] == pytest.approx(4 / 5)


def test_simulate_tiny_table_is_deterministic(tmp_path):
    args = ["simulate", "--reps", "2", "--na", "30", "--nb", "60", "--seed", "1"]
    assert main([*args, "--out-summary", str(tmp_path / "a.csv")]) == 0
    assert main([*args, "--out-summary", str(tmp_path / "b.csv"), "--workers", "2"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["rule"] for r in rows] == ["supervised", "mec+profile", "mec+empirical", "wj+empirical"]
    assert all(r["reps"] == "2" for r in rows)


def test_simulate_per_rep_output_and_target(tmp_path):
    assert main(["simulate", "--reps", "2", "--na", "30", "--nb", "60", "--rules", "mec+profile",
                 "--target-flr", "0.05", "--out-summary", str(tmp_path / "s.csv"),
                 "--out-reps", str(tmp_path / "r.csv")]) == 0
    with open(tmp_path / "r.csv") as fh:
        reps = list(csv.DictReader(fh))
    assert len(reps) == 2 and all(float(r["target_psi_hat"]) <= 0.05 for r in reps)


def test_sweep(tmp_path):
    assert main(["sweep", "--pa", "0.5,1.0", "--reps", "1", "--na", "20", "--nb", "40",
                 "--rules", "supervised", "--out-summary", str(tmp_path / "s.csv")]) == 0
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["p_A"] for r in rows] == ["0.5", "1.0"]


@pytest.mark.parametrize("argv", [
    ["simulate", "--scenario", "3"],
    ["simulate", "--reps", "0"],
    ["link", "--file-a", "a.csv"],
    ["bogus"],
])
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_alpha_and_rule(capsys):
    assert main(["simulate", "--reps", "1", "--alpha", "0.1,0.2"]) == 2
    assert main(["simulate", "--reps", "1", "--rules", "mec+magic"]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "meclink.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "meclink" in out.stdout


def test_links_writer_refuses_non_one_to_one(tmp_path):
    space = PatternTable.from_gamma(np.ones((2, 2, 1), dtype=int))
    bad = MecSet(space, np.array([0, 1]), np.ones(2), np.ones(2))
    with pytest.raises(DataError):
        write_links(tmp_path / "l.csv", bad)
    assert not (tmp_path / "l.csv").exists()


def test_pattern_table_writer(tmp_path):
    space = PatternTable.from_gamma(np.array([[[1, 0], [1, 1]], [[0, 0], [1, 1]]]))
    write_pattern_table(tmp_path / "p.csv", space)
    rows = (tmp_path / "p.csv").read_text().split()
    assert rows == ["pattern_bits,count", "00,1", "10,1", "11,2"]


def test_trace_writer_empty(tmp_path):
    write_trace(tmp_path / "t.csv", [])
    assert (tmp_path / "t.csv").read_text().strip() == "iteration,n_M,D"


def test_study_independent_of_workers():
    spec = GeneratorSpec(n_A=25, n_B=50)
    a = summarize(run_study(spec, 3, seed=2, rules=("supervised", "mec+empirical")))
    b = summarize(run_study(spec, 3, seed=2, rules=("supervised", "mec+empirical"), workers=3))
    assert a == b
    assert parse_rule("supervised") is None
    with pytest.raises(ValueError):
        parse_rule("mec")
