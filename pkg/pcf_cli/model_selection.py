import dataclasses
import functools
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn import metrics
from sklearn.model_selection import KFold

from pcf_cli.config import CvConfig
from pcf_cli.config import LossConfig
from pcf_cli.config import RegularizationConfig
from pcf_cli.config import TrainConfig
from pcf_cli.data import Dataset
from pcf_cli.error import FitFailedError
from pcf_cli.error import InvalidInputError
from pcf_cli.error import SelectionFailedError
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.model import evaluate
from pcf_cli.report import FitReport
from pcf_cli.report import LambdaScore
from pcf_cli.training import ArgminTarget
from pcf_cli.training import error_rate
from pcf_cli.training import fit
from pcf_cli.training import loss_value
from pcf_cli.types import LossKind
from pcf_cli.types import Metric

logger = logging.getLogger(__name__)


def _check_pair(y_pred: np.ndarray, y_true: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise InvalidInputError(f"Prediction shape {y_pred.shape} does not match target shape {y_true.shape}.")
    if y_true.ndim == 1:
        y_pred, y_true = y_pred[:, None], y_true[:, None]
    return y_pred, y_true


def r2_score(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    """Coefficient of determination averaged over outputs. A constant target scores 1 if matched exactly, else 0."""
    y_pred, y_true = _check_pair(y_pred, y_true)
    if y_true.shape[0] < 2:
        raise InvalidInputError(f"R2 needs at least 2 samples, got {y_true.shape[0]}.", name="samples")
    return float(metrics.r2_score(y_true, y_pred, multioutput="uniform_average"))


def rmse(y_pred: np.ndarray, y_true: np.ndarray) -> float:
    y_pred, y_true = _check_pair(y_pred, y_true)
    return float(np.sqrt(metrics.mean_squared_error(y_true.ravel(), y_pred.ravel())))


def validation_metric(loss: LossConfig) -> Metric:
    return Metric.error_rate if loss.kind == LossKind.logistic else Metric.r2


def score_model(model: PcfModel, data: Dataset, loss: LossConfig) -> dict[str, float]:
    """Metrics reported after a fit: R2 and RMSE for regression, error rate for classification."""
    y_pred = evaluate(model, data.x, data.theta)
    scores = {"loss": loss_value(loss, y_pred, data.y)}
    if loss.kind == LossKind.logistic:
        scores[Metric.error_rate.value] = error_rate(model, data)
    else:
        scores[Metric.rmse.value] = rmse(y_pred, data.y)
        if data.size >= 2:
            scores[Metric.r2.value] = r2_score(y_pred, data.y)
    return scores


def kfold_indices(size: int, folds: int, seed: int | None) -> list[np.ndarray]:
    """Validation indices of each fold: contiguous blocks of one seeded permutation, sizes differing by at most 1."""
    if folds < 2:
        raise InvalidInputError(f"Need at least 2 folds, got {folds}.", name="folds")
    if size < folds:
        raise InvalidInputError(f"Cannot split {size} samples into {folds} folds.", name="folds")
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    return [validation for _, validation in splitter.split(np.arange(size))]


def fold_score(model: PcfModel, data: Dataset, loss: LossConfig) -> float:
    """Higher is better: R2 for regression, accuracy for classification."""
    if loss.kind == LossKind.logistic:
        return 1.0 - error_rate(model, data)
    return r2_score(evaluate(model, data.x, data.theta), data.y)


@dataclasses.dataclass(frozen=True)
class FoldJob:
    lambda_index: int
    fold: int


def run_fold(
    job: FoldJob,
    arch: PcfArchitecture,
    data: Dataset,
    folds: list[np.ndarray],
    loss: LossConfig,
    reg: RegularizationConfig,
    grid: list[float],
    cfg: TrainConfig,
    argmin_target: ArgminTarget | None,
) -> float | None:
    validation = folds[job.fold]
    training = np.sort(np.concatenate([indices for k, indices in enumerate(folds) if k != job.fold]))
    value = grid[job.lambda_index]
    try:
        model, _ = fit(arch, data.take(training), loss, reg.with_lambda(value), cfg, argmin_target)
    except FitFailedError as e:
        logger.warning("lambda %.3e fold %d failed: %s", value, job.fold, e)
        return None
    score = fold_score(model, data.take(validation), loss)
    logger.debug("lambda %.3e fold %d: score %.6f", value, job.fold, score)
    return score


def cross_validate(
    arch: PcfArchitecture,
    data: Dataset,
    loss: LossConfig,
    reg_template: RegularizationConfig,
    cv: CvConfig,
    cfg: TrainConfig,
    argmin_target: ArgminTarget | None = None,
) -> tuple[PcfModel, FitReport]:
    """K-fold selection of lambda over the grid, then a refit on all data with the chosen value."""
    grid = list(cv.lambda_grid)
    if len(grid) == 0:
        raise InvalidInputError("Lambda grid is empty.", name="lambda_grid")
    folds = kfold_indices(data.size, cv.folds, cv.seed if cv.seed is not None else cfg.seed)

    # the (lambda, fold) jobs share one pool; each fit runs its starts sequentially inside its job
    inner = dataclasses.replace(cfg, n_workers=1, n_starts=cfg.starts)
    jobs = [FoldJob(i, k) for i in range(len(grid)) for k in range(cv.folds)]
    task = functools.partial(
        run_fold,
        arch=arch,
        data=data,
        folds=folds,
        loss=loss,
        reg=reg_template,
        grid=grid,
        cfg=inner,
        argmin_target=argmin_target,
    )
    with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
        scores = list(pool.map(task, jobs))

    lambda_scores = []
    for i, value in enumerate(grid):
        fold_scores = scores[i * cv.folds : (i + 1) * cv.folds]
        failed = any(score is None for score in fold_scores)
        mean = None if failed else float(np.mean(fold_scores))
        lambda_scores.append(LambdaScore(value=value, fold_scores=fold_scores, mean=mean))
        logger.info("lambda %.3e: mean validation score %s", value, "dropped" if failed else f"{mean:.6f}")

    candidates = [score for score in lambda_scores if not score.dropped]
    if len(candidates) == 0:
        raise SelectionFailedError("Every lambda in the grid had a fold whose fit failed.")
    chosen = min(candidates, key=lambda score: (-score.mean, score.value))

    model, report = fit(arch, data, loss, reg_template.with_lambda(chosen.value), cfg, argmin_target)
    metric = validation_metric(loss)
    report = dataclasses.replace(
        report,
        lambda_grid=grid,
        lambda_scores=lambda_scores,
        validation_metric="accuracy" if metric == Metric.error_rate else metric.value,
    )
    return model, report
