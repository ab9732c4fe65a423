import json

import numpy as np
import pytest
from conftest import shifted_parabola
from typer.testing import CliRunner

from pcf_cli import __version__
from pcf_cli import cli
from pcf_cli.data import read_data
from pcf_cli.data import write_data
from pcf_cli.model import evaluate
from pcf_cli.model_file import load_model
from pcf_cli.model_selection import r2_score

runner = CliRunner()

RUN_CONFIG = {
    "architecture": {"widths": [3], "psi_widths": [3], "activation": "softplus", "quadratic": "full"},
    "training": {"adam_iters": 5, "lbfgs_iters": 20, "n_starts": 2, "n_workers": 1},
    "split": {"test_fraction": 0.2},
}


@pytest.fixture
def data_path(tmp_path):
    path = tmp_path / "data.csv"
    write_data(shifted_parabola(), path)
    return path


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(RUN_CONFIG))
    return path


@pytest.fixture
def model_path(tmp_path, data_path, config_path):
    path = tmp_path / "model.json"
    result = runner.invoke(cli, ["fit", "--data", str(data_path), "--out", str(path), "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    return path


def last_line(result) -> str:
    return result.stdout.strip().splitlines()[-1]


def test_version():
    result = runner.invoke(cli, ["--version"])

    assert result.exit_code == 0
    assert __version__ in result.stdout


class TestFit:
    def test_writes_a_loadable_model(self, model_path):
        model = load_model(model_path)

        assert (model.arch.n, model.arch.p, model.arch.d) == (1, 1, 1)

    def test_same_seed_gives_byte_identical_models(self, tmp_path, data_path, config_path, model_path):
        again = tmp_path / "again.json"

        result = runner.invoke(
            cli, ["fit", "--data", str(data_path), "--model", str(again), "--config", str(config_path)]
        )

        assert result.exit_code == 0
        assert again.read_bytes() == model_path.read_bytes()

    def test_seed_option_changes_the_fit(self, tmp_path, data_path, config_path, model_path):
        other = tmp_path / "other.json"

        args = ["fit", "--data", str(data_path), "--out", str(other), "--config", str(config_path), "--seed", "9"]
        result = runner.invoke(cli, args)

        assert result.exit_code == 0
        assert other.read_bytes() != model_path.read_bytes()

    def test_missing_data_file(self, tmp_path):
        result = runner.invoke(cli, ["fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m")])

        assert result.exit_code == 1

    def test_unknown_config_option(self, tmp_path, data_path):
        config = tmp_path / "bad.json"
        config.write_text('{"training": {"epochs": 10}}')

        result = runner.invoke(cli, ["fit", "--data", str(data_path), "--config", str(config)])

        assert result.exit_code == 1

    def test_bad_header(self, tmp_path):
        data = tmp_path / "data.csv"
        data.write_text("x0,z0\n1,2\n")

        result = runner.invoke(cli, ["fit", "--data", str(data), "--out", str(tmp_path / "model.json")])

        assert result.exit_code == 1


class TestEval:
    def test_predictions_match_the_model(self, tmp_path, data_path, model_path):
        out = tmp_path / "predictions.csv"

        result = runner.invoke(cli, ["eval", "--model", str(model_path), "--data", str(data_path), "--out", str(out)])

        assert result.exit_code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "y0"
        data = read_data(data_path)
        expected = evaluate(load_model(model_path), data.x, data.theta)[:, 0]
        np.testing.assert_array_equal([float(line) for line in lines[1:]], expected)

    def test_accepts_data_without_outputs(self, tmp_path, model_path):
        data = tmp_path / "inputs.csv"
        data.write_text("x0,th0\n0.5,0.1\n")

        result = runner.invoke(cli, ["eval", "--model", str(model_path), "--data", str(data)])

        assert result.exit_code == 0
        assert "y0" in result.stdout

    def test_corrupt_model_file(self, tmp_path, data_path):
        model = tmp_path / "model.json"
        model.write_text('{"format_version": 99}')

        result = runner.invoke(cli, ["eval", "--model", str(model), "--data", str(data_path)])

        assert result.exit_code == 1


class TestScore:
    def test_r2(self, data_path, model_path):
        result = runner.invoke(cli, ["score", "--model", str(model_path), "--data", str(data_path)])

        assert result.exit_code == 0
        data = read_data(data_path)
        expected = r2_score(evaluate(load_model(model_path), data.x, data.theta), data.y)
        assert float(last_line(result)) == expected

    def test_rmse_agrees_with_eval_output(self, tmp_path, data_path, model_path):
        predictions = tmp_path / "predictions.csv"
        runner.invoke(cli, ["eval", "--model", str(model_path), "--data", str(data_path), "--out", str(predictions)])

        args = ["score", "--model", str(model_path), "--data", str(data_path), "--metric", "rmse"]
        result = runner.invoke(cli, args)

        assert result.exit_code == 0
        y_pred = np.array([float(line) for line in predictions.read_text().splitlines()[1:]])
        y_true = read_data(data_path).y[:, 0]
        assert float(last_line(result)) == pytest.approx(np.sqrt(np.mean((y_pred - y_true) ** 2)), abs=1e-12)

    def test_error_rate_needs_labels(self, data_path, model_path):
        args = ["score", "--model", str(model_path), "--data", str(data_path), "--metric", "error_rate"]
        result = runner.invoke(cli, args)

        assert result.exit_code == 1


class TestExport:
    def test_bound_graph(self, tmp_path, model_path):
        out = tmp_path / "graph.json"

        result = runner.invoke(cli, ["export", "--model", str(model_path), "--theta", "0.25", "--out", str(out)])

        assert result.exit_code == 0
        graph = json.loads(out.read_text())
        assert graph["mode"] == "bound_theta"
        assert graph["theta"] == [0.25]

    def test_symbolic_code(self, tmp_path, model_path):
        out = tmp_path / "model.py"

        args = ["export", "--model", str(model_path), "--mode", "symbolic_theta", "--template", "cvxpy", "--out"]
        result = runner.invoke(cli, args + [str(out)])

        assert result.exit_code == 0
        assert "def pcf_expression(x, params=None):" in out.read_text()

    def test_bound_without_theta(self, model_path):
        result = runner.invoke(cli, ["export", "--model", str(model_path)])

        assert result.exit_code == 1

    def test_unknown_template(self, model_path):
        args = ["export", "--model", str(model_path), "--theta", "0.0", "--template", "fortran"]
        result = runner.invoke(cli, args)

        assert result.exit_code == 1


def test_smoke_experiment(tmp_path):
    out = tmp_path / "pwa"

    result = runner.invoke(cli, ["experiment", "pwa", "--scale", "smoke", "--out", str(out), "--workers", "1"])

    assert result.exit_code == 0, result.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["experiment"] == "pwa"
    assert metrics["scale"] == "smoke"
    assert (out / "model.json").exists()
    assert (out / "predictions.csv").exists()
