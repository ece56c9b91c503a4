import csv
import subprocess
import sys

import pytest

from mlmgof.cli import RunConfig, UsageError, main, parse_args
from mlmgof.data import write_csv
from mlmgof.simlab import applied_example, monte_carlo_bounds

MODEL = ["--fixed", "intervention,bmi_c,visit", "--re", "id2:intercept",
         "--re", "id3:intercept+visit:unstructured"]


@pytest.fixture(scope="module")
def applied_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "family.csv"
    write_csv(applied_example()[0], path)
    return str(path)


def test_parse_gof_defaults():
    cfg = parse_args(["gof", "--data", "d.csv", "--outcome", "y", "--fixed", "x1,x2",
                      "--re", "id2:intercept+x2", "--re", "id3:intercept"])
    assert isinstance(cfg, RunConfig)
    assert cfg.groups == "data_driven"
    assert cfg.fixed == ("x1", "x2")
    assert cfg.random.level2.slopes == ("x2",) and cfg.random.level3.intercept


def test_parse_forced_groups_and_simulate():
    cfg = parse_args(["gof", "--data", "d.csv", "--fixed", "x1", "--groups", "10"])
    assert cfg.groups == "forced(10)"
    cfg = parse_args(["simulate", "--part", "3", "--reps", "100", "--seed", "7",
                      "--out", "part3.csv", "--jobs", "1"])
    assert (cfg.part, cfg.reps, cfg.seed, cfg.out) == (3, 100, 7, "part3.csv")


def test_seed_falls_back_to_environment(monkeypatch):
    argv = ["simulate", "--part", "1", "--reps", "2", "--out", "o.csv"]
    monkeypatch.delenv("MLMGOF_SEED", raising=False)
    with pytest.raises(UsageError):
        parse_args(argv)
    monkeypatch.setenv("MLMGOF_SEED", "42")
    assert parse_args(argv).seed == 42


@pytest.mark.parametrize("argv", [
    ["gof", "--data", "d.csv", "--groups", "1"],
    ["gof", "--data", "d.csv", "--groups", "51"],
    ["gof", "--data", "d.csv", "--bogus"],
    ["fit"],
    ["fit", "--data", "d.csv", "--re", "id9:intercept"],
    ["simulate", "--part", "1", "--reps", "0", "--seed", "1", "--out", "o.csv"],
])
def test_usage_errors_exit_two(argv, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: usage:")


def test_data_errors_exit_three(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "missing.csv")]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("y,id2,x\n2,a,1\n0,b,1\n")
    assert main(["fit", "--data", str(bad), "--fixed", "x"]) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 2 and all(e.startswith("error: data:") for e in err)


def test_fit_prints_table(applied_csv, capsys):
    assert main(["fit", "--data", applied_csv] + MODEL) == 0
    out = capsys.readouterr().out
    assert "OR" in out and "95% CI" in out
    assert "Level-3: intercept" in out and "Level-2: intercept" in out
    assert "intervention" in out


def test_gof_auto_and_forced(applied_csv, tmp_path, capsys):
    rec = tmp_path / "gof.csv"
    assert main(["gof", "--data", applied_csv, "--out", str(rec)] + MODEL) == 0
    out = capsys.readouterr().out
    assert "Groups used (G) = 5" in out and "df = 4" in out
    row = next(csv.DictReader(rec.open()))
    assert row["G_used"] == "5" and row["status"] == "ok"

    assert main(["gof", "--data", applied_csv, "--groups", "10"] + MODEL) == 1
    assert "no valid test" in capsys.readouterr().out


def test_simulate_and_catalog(tmp_path, capsys):
    out = tmp_path / "sim.csv"
    argv = ["simulate", "--scenario", "p3-balanced-n5-g10", "--reps", "2",
            "--seed", "3", "--jobs", "1", "--out", str(out)]
    assert main(argv) == 0
    first = out.read_bytes()
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and rows[0]["failure_rate"] == "1.0"
    # no valid replication leaves the uninformative band
    assert (float(rows[0]["mc_lower"]), float(rows[0]["mc_upper"])) == (0.0, 1.0)
    assert main(argv) == 0
    assert out.read_bytes() == first
    capsys.readouterr()

    assert main(["catalog", "--part", "3"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("p3-")]
    assert len(lines) == 20


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mlmgof", "catalog", "--part", "1"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0
    assert len(r.stdout.splitlines()) == 12


def test_simulate_bounds_from_valid_replications(tmp_path):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--scenario", "p3-unbalanced-n5-dd", "--reps", "50",
                 "--seed", "11", "--jobs", "1", "--out", str(out)]) == 0
    row = next(csv.DictReader(out.open()))
    valid = int(row["reps"]) - int(row["failures"])
    lo, hi = monte_carlo_bounds(0.05, valid)
    assert (float(row["mc_lower"]), float(row["mc_upper"])) == (lo, hi)
    assert row["reps"] == "50"
