import dataclasses
import logging
from pathlib import Path

from rich.console import Console
from rich.progress import Progress
from rich.progress import SpinnerColumn
from rich.progress import TextColumn

from pcf_cli.config import RunConfig
from pcf_cli.data import Dataset
from pcf_cli.data import read_data
from pcf_cli.data import split_dataset
from pcf_cli.model_file import save_model
from pcf_cli.model_selection import cross_validate
from pcf_cli.model_selection import score_model
from pcf_cli.report import FitReport
from pcf_cli.training import fit

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class FitConfig:
    data: Path
    out: Path
    config: Path | None = None
    seed: int | None = None
    test_data: Path | None = None


def execute_fit(config: FitConfig) -> FitReport:
    run = RunConfig.load(config.config).with_seed(config.seed)
    data = read_data(config.data)
    if config.test_data is not None:
        train, test = data, read_data(config.test_data)
    else:
        train, test = split_dataset(data, run.split.test_fraction, run.split_seed)
    logger.info("training on %d samples, testing on %d", train.size, 0 if test is None else test.size)

    arch = run.architecture.build(train.n, train.p, train.d)
    model, report = fit_with_progress(run, arch, train)
    save_model(model, config.out)

    test_metrics = None if test is None else score_model(model, test, run.loss)
    return report.with_metrics(score_model(model, train, run.loss), test_metrics)


def fit_with_progress(run: RunConfig, arch, train: Dataset):
    cv = run.cross_validation
    description = f"Cross-validating {len(cv.lambda_grid)} lambdas" if cv.enabled else "Fitting"
    with Progress(
        SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=Console(stderr=True)
    ) as progress:
        task = progress.add_task(description=description, total=None)
        if cv.enabled:
            cv = dataclasses.replace(cv, seed=run.cv_seed)
            result = cross_validate(arch, train, run.loss, run.regularization, cv, run.training)
        else:
            result = fit(arch, train, run.loss, run.regularization, run.training)
        progress.update(task, completed=True)
    return result
