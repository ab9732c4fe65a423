import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from pcf_cli.config import RunConfig
from pcf_cli.data import Dataset
from pcf_cli.data import format_table
from pcf_cli.model import PcfModel
from pcf_cli.model_file import save_model
from pcf_cli.report import FitReport
from pcf_cli.training import ArgminTarget
from pcf_cli.training import fit
from pcf_cli.types import ExperimentName
from pcf_cli.types import Scale

logger = logging.getLogger(__name__)

# training overrides that keep a smoke run to a few seconds
SMOKE_TRAINING = {"adam_iters": 5, "lbfgs_iters": 10, "n_starts": 1}


@dataclasses.dataclass
class ExperimentConfig:
    name: ExperimentName
    out: Path
    scale: Scale = Scale.desk
    seed: int = 0
    n_workers: int = 4

    def rng(self, stream: int) -> np.random.Generator:
        """Independent generator per data stream (train, test, ...) derived from the run seed."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, stream]))


def fit_experiment(
    config: ExperimentConfig,
    settings: dict,
    data: Dataset,
    argmin_target: ArgminTarget | None = None,
) -> tuple[PcfModel, FitReport]:
    settings = {key: dict(value) for key, value in settings.items()}
    training = settings.setdefault("training", {})
    if config.scale == Scale.smoke:
        training.update(SMOKE_TRAINING)
    training["seed"] = config.seed
    training["n_workers"] = config.n_workers

    run = RunConfig.from_dict(settings)
    config.out.mkdir(parents=True, exist_ok=True)
    arch = run.architecture.build(data.n, data.p, data.d)
    logger.info("%s: fitting %d samples (n=%d, p=%d, d=%d)", config.name, data.size, data.n, data.p, data.d)
    model, report = fit(arch, data, run.loss, run.regularization, run.training, argmin_target)

    save_model(model, config.out / "model.json")
    (config.out / "config.json").write_text(json.dumps(run.to_dict(), indent=2) + "\n")
    (config.out / "report.json").write_text(report.to_json() + "\n")
    return model, report


def write_columns(path: Path, columns: dict[str, np.ndarray]):
    table = np.column_stack([np.asarray(column, dtype=float) for column in columns.values()])
    path.write_text(format_table(list(columns), table))


def rmse_where(y_pred: np.ndarray, y_true: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """RMSE over the masked samples; None when the mask selects nothing."""
    error = np.asarray(y_pred, dtype=float) - np.asarray(y_true, dtype=float)
    if mask is not None:
        error = error[mask]
    if error.size == 0:
        return None
    return float(np.sqrt(np.mean(error**2)))
