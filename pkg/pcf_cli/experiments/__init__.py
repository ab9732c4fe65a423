import json
import logging

from rich.console import Console
from rich.progress import Progress
from rich.progress import SpinnerColumn
from rich.progress import TextColumn

from pcf_cli.experiments import adp
from pcf_cli.experiments import battery
from pcf_cli.experiments import ellipse
from pcf_cli.experiments import pwa
from pcf_cli.experiments import quadratic
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.types import ExperimentName

logger = logging.getLogger(__name__)

EXPERIMENTS = {
    ExperimentName.pwa: pwa.run,
    ExperimentName.quadratic: quadratic.run,
    ExperimentName.battery: battery.run,
    ExperimentName.adp: adp.run,
    ExperimentName.ellipse: ellipse.run,
}


def run_experiment(config: ExperimentConfig) -> dict:
    """Generate data, fit and score one experiment; artifacts and metrics.json land in config.out."""
    config.out.mkdir(parents=True, exist_ok=True)
    metrics = EXPERIMENTS[config.name](config)
    metrics = {"experiment": config.name.value, "scale": config.scale.value, "seed": config.seed, **metrics}
    (config.out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    logger.info("%s finished: %s", config.name, metrics)
    return metrics


def execute_experiment(config: ExperimentConfig) -> dict:
    with Progress(
        SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=Console(stderr=True)
    ) as progress:
        task = progress.add_task(description=f"Running {config.name} at {config.scale} scale", total=None)
        metrics = run_experiment(config)
        progress.update(task, completed=True)
    return metrics
