import json
import os

import pytest

from harmap import config
from harmap.constants import EXIT_CONVERGENCE_ERROR, EXIT_INPUT_ERROR, EXIT_NUMERICAL_ERROR
from harmap.errors import NumericalError
from harmap.io import parse_geometry, parse_solution, write_recipe
from harmap.scripts import cli
from harmap.scripts.cli import app


@pytest.fixture
def solution_file(cli_runner, tmp_path):
    out = str(tmp_path / "square.json")
    result = cli_runner.invoke(app, ["solve", "square", "--degree", "2", "--refine", "1", "--out", out])
    assert result.exit_code == 0
    return out


def test_solve(cli_runner, tmp_path):
    out, svg = str(tmp_path / "sol.json"), str(tmp_path / "sol.svg")
    result = cli_runner.invoke(
        app, ["solve", "square", "--scheme", "c0dg", "--degree", "3", "--refine", "1", "--out", out, "--svg", svg]
    )
    assert result.exit_code == 0
    assert "SOLVE:" in result.output
    assert os.path.exists(svg)

    solution = parse_solution(open(out).read())
    assert solution.space.degree == 3
    assert solution.report["bijectivity"]["negative_count"] == 0

    with open(str(tmp_path / "sol.provenance.json")) as f:
        provenance = json.load(f)
    assert provenance["command"] == "solve"
    assert provenance["config"]["scheme"] == "c0dg"


@pytest.mark.parametrize("scheme", ["c0dg", "weakform", "rotfree"])
def test_solve_json(cli_runner, scheme):
    result = cli_runner.invoke(app, ["solve", "square", "--scheme", scheme, "--degree", "2", "--refine", "1", "--json"])
    assert result.exit_code == 0
    report = json.loads(result.output)
    assert report["quality"]["negative_point_count"] == 0
    assert pytest.approx(report["quality"]["winslow"], abs=1e-6) == 2.0


def test_solve_geometry_file(cli_runner, tmp_path):
    geometry = str(tmp_path / "lbend.json")
    result = cli_runner.invoke(app, ["geometry", "lbend", "--out", geometry])
    assert result.exit_code == 0
    result = cli_runner.invoke(app, ["solve", geometry, "--degree", "2", "--refine", "1", "--json"])
    assert result.exit_code == 0
    assert json.loads(result.output)["geometry"]["name"] == "lbend"


def test_geometry(cli_runner):
    result = cli_runner.invoke(app, ["geometry", "four-patch"])
    assert result.exit_code == 0
    q, _, metadata = parse_geometry(result.output)
    assert q.n_patches == 4
    assert metadata["name"] == "four-patch"


def test_plot(cli_runner, tmp_path, solution_file):
    svg = str(tmp_path / "x.svg")
    result = cli_runner.invoke(app, ["plot", solution_file, "--out", svg, "--isolines", "3"])
    assert result.exit_code == 0
    assert open(svg).read().startswith("<?xml")
    assert os.path.exists(str(tmp_path / "x.provenance.json"))

    result = cli_runner.invoke(app, ["plot", solution_file, "--out", svg, "--field", "s"])
    assert result.exit_code == EXIT_INPUT_ERROR


def test_grid(cli_runner, solution_file):
    result = cli_runner.invoke(app, ["grid", solution_file, "--n", "2"])
    assert result.exit_code == 0
    assert len(result.output.splitlines()) == 1 + 4


def test_metrics(cli_runner, tmp_path, solution_file):
    out = str(tmp_path / "metrics.json")
    result = cli_runner.invoke(app, ["metrics", solution_file, "--reference", solution_file, "--out", out, "--json"])
    assert result.exit_code == 0
    report = json.loads(result.output)
    assert set(report) == {"quality", "bijectivity", "vertex_limits", "ratios"}
    assert pytest.approx(report["ratios"]["nu_area"]) == 1.0
    assert set(json.load(open(out))) == set(report)

    result = cli_runner.invoke(app, ["metrics", solution_file])
    assert result.exit_code == 0
    assert "BIJECTIVITY" in result.output


def test_reparam(cli_runner, tmp_path):
    out = str(tmp_path / "reparam.json")
    result = cli_runner.invoke(
        app,
        ["reparam", "four-patch", "--mode", "interface-removal", "--kappa", "9", "--degree", "2", "--refine", "1",
         "--out", out, "--json"],
    )
    assert result.exit_code == 0
    report = json.loads(result.output)
    assert report["steps"][0]["mode"] == "interface-removal"
    assert report["steps"][0]["options"]["kappa"] == 9.0
    assert "nu_gamma" in report["ratios"]

    solution = parse_solution(open(out).read())
    assert solution.s is not None


def test_reparam_recipe(cli_runner, tmp_path, solution_file):
    recipe = str(tmp_path / "recipe.json")
    with open(recipe, "w") as f:
        f.write(write_recipe([("adapt", {"nu1": 0.0, "nu2": 1.0})]))
    result = cli_runner.invoke(app, ["reparam", solution_file, "--recipe", recipe, "--json"])
    assert result.exit_code == 0
    assert json.loads(result.output)["steps"][0]["options"]["nu1"] == 0.0


def test_reparam_steps(cli_runner, tmp_path, solution_file):
    recipe = str(tmp_path / "recipe.json")
    with open(recipe, "w") as f:
        f.write(write_recipe([("adapt", {})]))
    result = cli_runner.invoke(app, ["reparam", solution_file, "--recipe", recipe, "--mode", "adapt"])
    assert result.exit_code == EXIT_INPUT_ERROR

    result = cli_runner.invoke(app, ["reparam", solution_file, "--kappa", "1"])
    assert result.exit_code == EXIT_INPUT_ERROR

    with open(recipe, "w") as f:
        f.write(write_recipe([("adapt", {"smoothness": 1})]))
    result = cli_runner.invoke(app, ["reparam", solution_file, "--recipe", recipe])
    assert result.exit_code == EXIT_INPUT_ERROR


def test_study_levels(cli_runner):
    result = cli_runner.invoke(app, ["study", "annulus", "--levels", "2"])
    assert result.exit_code == EXIT_INPUT_ERROR


@pytest.mark.slow
def test_study(cli_runner, tmp_path):
    prefix = str(tmp_path / "annulus")
    result = cli_runner.invoke(
        app, ["study", "annulus", "--degree", "2", "--refine", "1", "--levels", "3", "--out", prefix, "--json"]
    )
    assert result.exit_code == 0
    summary = json.loads(result.output)
    assert len(summary["levels"]) == 3
    assert summary["levels"][0]["increment"] is None
    assert summary["kappa"] > 1
    assert os.path.exists(f"{prefix}.level2.json")
    assert os.path.exists(f"{prefix}.study.json")


@pytest.mark.parametrize(
    "args",
    [
        ["solve", "torus"],
        ["solve", "square", "--threads", "0"],
        ["solve", "square", "--eps", "-1"],
        ["metrics", "missing.json"],
        ["geometry", "torus"],
    ],
)
def test_input_errors(cli_runner, args):
    result = cli_runner.invoke(app, args)
    assert result.exit_code == EXIT_INPUT_ERROR
    assert "Error:" in result.output


def test_convergence_error(cli_runner, tmp_path, monkeypatch):
    monkeypatch.setattr(config, "MAX_ITER", 1)
    out = str(tmp_path / "lbend.json")
    result = cli_runner.invoke(app, ["solve", "lbend", "--degree", "2", "--refine", "1", "--out", out])
    assert result.exit_code == EXIT_CONVERGENCE_ERROR
    assert not os.path.exists(out)

    with open(str(tmp_path / "lbend.trace.json")) as f:
        trace = json.load(f)
    assert len(trace["trace"]) >= 1


def test_numerical_error(cli_runner, monkeypatch):
    def fail(*args, **kwargs):
        raise NumericalError("singular system")

    monkeypatch.setattr(cli, "parameterise", fail)
    result = cli_runner.invoke(app, ["solve", "square"])
    assert result.exit_code == EXIT_NUMERICAL_ERROR
    assert "singular system" in result.output
