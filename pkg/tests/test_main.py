import json

import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp

import util

from main import EXIT_INPUT, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, Application
from netmodel import write_case
from contingency import load_scenarios
from conic import Cone, ConeType, ConicProblem


@pytest.fixture
def case_file(five_bus, tmp_path):
    path = tmp_path / "five_bus.m"
    path.write_text(write_case(five_bus))
    return str(path)


@pytest.fixture
def scenario_file(case_file, tmp_path):
    path = str(tmp_path / "scen.json")
    assert Application(["scenarios", case_file, "--count", "3", "--seed", "42", "-o", path]).run() == EXIT_OK
    return path


def run(*argv: str) -> int:
    return Application(list(argv)).run()


def test_check(case_file, capsys):
    assert run("check", case_file) == EXIT_OK
    out = capsys.readouterr().out
    assert "5 buses, 5 branches, 2 generators, 2 loads, 1 shunts" in out
    assert "No hazards" in out


@pytest.mark.parametrize(
    "argv",
    [
        ["solve"],
        ["frobnicate", "case.m"],
        ["gap", "case.m", "--id", "1"],
        ["solve", "case.m", "--scenario", "scen.json"],
        ["solve", "case.m", "--eps", "0"],
        ["solve", "case.m", "--time-limit", "soon"],
    ],
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as e:
        Application(argv)
    assert e.value.code == EXIT_USAGE


def test_bad_inputs(case_file, tmp_path):
    broken = tmp_path / "broken.m"
    broken.write_text("mpc.baseMVA = 100;\nmpc.bus = [\n 1 3 abc;\n];\n")
    assert run("check", str(broken)) == EXIT_INPUT
    assert run("check", str(tmp_path / "missing.m")) == EXIT_INPUT

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 0, "fraction": 0.3, "count": 1, "scenarios": [{"id": 0, "removed": [42]}]}))
    assert run("solve", case_file, "--scenario", str(bad), "--id", "0") == EXIT_INPUT
    assert run("solve", case_file, "--priorities", str(bad)) == EXIT_INPUT


def test_scenarios(scenario_file):
    scenario_set = load_scenarios(scenario_file)
    assert (scenario_set.count, scenario_set.seed, scenario_set.fraction) == (3, 42, 0.3)


def test_solve(case_file, scenario_file, tmp_path, capsys):
    output = tmp_path / "solution.json"
    assert run("solve", case_file, "--scenario", scenario_file, "--id", "1", "-o", str(output)) == EXIT_OK
    assert "Status Optimal" in capsys.readouterr().out
    payload = util.read_json(str(output))
    assert payload["status"] == "Optimal"
    assert 0.0 <= payload["served_fraction"] <= 1.0 + 1e-5


def test_solve_with_priorities(case_file, tmp_path):
    priorities = tmp_path / "priorities.json"
    priorities.write_text(json.dumps({"1": 2.0, "2": 0.5}))
    assert run("solve", case_file, "--priorities", str(priorities)) == EXIT_OK


def test_export_and_solve_conic(case_file, tmp_path, capsys):
    problem = tmp_path / "problem.json"
    assert run("export-conic", case_file, "-o", str(problem)) == EXIT_OK
    assert ConicProblem.from_dict(util.read_json(str(problem))).n == 50
    assert run("solve-conic", str(problem)) == EXIT_OK
    assert "Status Optimal" in capsys.readouterr().out


def test_solve_conic_infeasible(tmp_path):
    prob = ConicProblem(
        c=np.array([1.0]),
        A=sp.csc_matrix(np.array([[-1.0], [1.0]])),
        b=np.array([-1.0, 0.0]),
        cones=[Cone(ConeType.NONNEG, 2)],
    )
    path = tmp_path / "infeasible.json"
    util.write_json(str(path), prob.to_dict())
    assert run("solve-conic", str(path)) == EXIT_SOLVER


def test_batch_and_summarize(case_file, scenario_file, tmp_path, capsys):
    results, hist = tmp_path / "results.csv", tmp_path / "hist.csv"
    assert run("batch", case_file, scenario_file, "-o", str(results), "--hist", str(hist)) == EXIT_OK
    assert len(pd.read_csv(results)) == 3
    assert pd.read_csv(hist)["count"].sum() == 3
    capsys.readouterr()

    assert run("summarize", str(results), str(results)) == EXIT_OK
    out = capsys.readouterr().out
    assert "Records: 3" in out
    assert "optimal_pct" in out
    # the same file given twice gets two "==" headers and two comparison rows
    assert out.count(str(results)) == 4


def test_gap(case_file, scenario_file, capsys):
    assert run("gap", case_file) == EXIT_OK
    assert "gap" in capsys.readouterr().out
    assert run("gap", case_file, "--scenario", scenario_file) == EXIT_OK
    assert "Mean gap over Optimal scenarios" in capsys.readouterr().out
