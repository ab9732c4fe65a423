import contextlib
import json
import logging
from pathlib import Path
from typing import List

import typer
from rich.console import Console
from rich.logging import RichHandler
from typing_extensions import Annotated

from pcf_cli.constants import DEFAULT_MODEL_FILENAME
from pcf_cli.data import format_float
from pcf_cli.error import PcfError
from pcf_cli.error import error_and_exit
from pcf_cli.error import exit_code_for
from pcf_cli.evaluate import EvalConfig
from pcf_cli.evaluate import execute_eval
from pcf_cli.experiments import execute_experiment
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.export import execute_export
from pcf_cli.fit import FitConfig
from pcf_cli.fit import execute_fit
from pcf_cli.report import print_report
from pcf_cli.score import ScoreConfig
from pcf_cli.score import execute_score
from pcf_cli.types import ExperimentName
from pcf_cli.types import ExportMode
from pcf_cli.types import Metric
from pcf_cli.types import Scale

__version__ = "0.1.0"

cli = typer.Typer(pretty_exceptions_show_locals=False, no_args_is_help=True)


def version_callback(value: bool):
    if value:
        typer.echo(__version__)
        raise typer.Exit()


def verbose_callback(value: bool):
    handler = RichHandler(console=Console(stderr=True), show_path=False)
    logging.basicConfig(
        level=logging.DEBUG if value else logging.WARNING, format="%(message)s", handlers=[handler], force=True
    )


@contextlib.contextmanager
def exit_on_error():
    """Turn library errors into a red panel on stderr and exit code 1 (input) or 2 (runtime)."""
    try:
        yield
    except (PcfError, FileNotFoundError) as e:
        error_and_exit(str(e), exit_code_for(e))


@cli.callback()
def main(
    verbose: Annotated[bool, typer.Option("--verbose", callback=verbose_callback, help="Log at debug level.")] = False,
    version: Annotated[bool, typer.Option("--version", callback=version_callback)] = False,
):
    pass


@cli.command()
def fit(
    data: Annotated[Path, typer.Option(help="Training data CSV with columns x*, th*, y*.")],
    out: Annotated[Path, typer.Option("--out", "--model", help="Where to write the model.")] = Path(
        DEFAULT_MODEL_FILENAME
    ),
    config: Annotated[Path, typer.Option(help="JSON run configuration.")] = None,
    seed: Annotated[int, typer.Option(help="Overrides the training and split seeds.")] = None,
    test_data: Annotated[Path, typer.Option(help="Held-out data instead of a seeded split.")] = None,
):
    """Fit a model and print the fit report as JSON."""
    with exit_on_error():
        report = execute_fit(FitConfig(data=data, out=out, config=config, seed=seed, test_data=test_data))
    print_report(report)
    typer.echo(report.to_json())


@cli.command("eval")
def evaluate(
    model: Annotated[Path, typer.Option(help="Model file written by fit.")],
    data: Annotated[Path, typer.Option(help="CSV with columns x*, th*; y* columns are ignored.")],
    out: Annotated[Path, typer.Option(help="Write predictions here instead of stdout.")] = None,
):
    """Predict y for every row of the data."""
    with exit_on_error():
        text = execute_eval(EvalConfig(model=model, data=data, out=out))
    if out is None:
        typer.echo(text, nl=False)


@cli.command()
def score(
    model: Annotated[Path, typer.Option(help="Model file written by fit.")],
    data: Annotated[Path, typer.Option(help="Labelled data CSV.")],
    metric: Annotated[Metric, typer.Option()] = Metric.r2,
):
    """Score a model on labelled data."""
    with exit_on_error():
        value = execute_score(ScoreConfig(model=model, data=data, metric=metric))
    typer.echo(format_float(value))


@cli.command()
def export(
    model: Annotated[Path, typer.Option(help="Model file written by fit.")],
    mode: Annotated[ExportMode, typer.Option()] = ExportMode.bound_theta,
    theta: Annotated[List[float], typer.Option(help="Parameter value for bound_theta, one option per entry.")] = None,
    out: Annotated[Path, typer.Option(help="Write the export here instead of stdout.")] = None,
    template: Annotated[str, typer.Option(help="Emit code with a shipped template name or a TOML path.")] = None,
):
    """Export a model as an expression graph (JSON) or as source code rendered from a template."""
    with exit_on_error():
        text = execute_export(model, mode, out, theta=theta or [], template=template)
    if out is None:
        typer.echo(text, nl=False)


@cli.command()
def experiment(
    name: ExperimentName,
    scale: Annotated[Scale, typer.Option()] = Scale.desk,
    seed: Annotated[int, typer.Option()] = 0,
    out: Annotated[Path, typer.Option(help="Run directory; defaults to runs/<name>.")] = None,
    workers: Annotated[int, typer.Option(min=1)] = 4,
):
    """Run one of the built-in experiments and print its metrics as JSON."""
    out = out if out is not None else Path("runs") / name.value
    with exit_on_error():
        metrics = execute_experiment(ExperimentConfig(name=name, out=out, scale=scale, seed=seed, n_workers=workers))
    typer.echo(json.dumps(metrics, indent=2))
