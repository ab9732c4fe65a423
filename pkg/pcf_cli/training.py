import dataclasses
import functools
import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from pcf_cli.autodiff import ArgminTargets
from pcf_cli.autodiff import objective_and_grad
from pcf_cli.autodiff import pointwise_loss
from pcf_cli.config import LossConfig
from pcf_cli.config import RegularizationConfig
from pcf_cli.config import TrainConfig
from pcf_cli.data import Dataset
from pcf_cli.error import FitFailedError
from pcf_cli.error import InvalidInputError
from pcf_cli.error import InvalidLabelError
from pcf_cli.error import NonFiniteError
from pcf_cli.error import UnsupportedCombinationError
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.model import Scaling
from pcf_cli.model import evaluate
from pcf_cli.model import init_weights
from pcf_cli.optim import Adam
from pcf_cli.optim import minimize_lbfgs
from pcf_cli.report import FitReport
from pcf_cli.report import StartOutcome
from pcf_cli.types import Activation
from pcf_cli.types import LossKind

logger = logging.getLogger(__name__)

# Maps training thetas (N, p) to argmin points g(theta) (N, n) and optional tilts q(theta) (N, n).
ArgminTarget = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray | None]]


def check_labels(y: np.ndarray):
    if not np.all((y == 1.0) | (y == -1.0)):
        bad = np.unique(y[(y != 1.0) & (y != -1.0)])[:5]
        raise InvalidLabelError(f"Labels must be -1 or +1 for the logistic loss, found {bad.tolist()}.", name="y")


def loss_value(loss: LossConfig, y_pred: np.ndarray, y_true: np.ndarray) -> float:
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise InvalidInputError(f"Prediction shape {y_pred.shape} does not match target shape {y_true.shape}.")
    if loss.kind == LossKind.logistic:
        check_labels(y_true)
    values, _ = pointwise_loss(loss, y_pred, y_true)
    return float(np.mean(values))


def error_rate(model: PcfModel, data: Dataset) -> float:
    """Fraction of label entries with y * f < 0; f = 0 counts as correct."""
    check_labels(data.y)
    f = evaluate(model, data.x, data.theta)
    return float(np.mean(data.y * f < 0.0))


def standardize(data: Dataset, scaling: Scaling | None) -> Dataset:
    if scaling is None:
        return data
    return Dataset(scaling.apply_x(data.x), scaling.apply_theta(data.theta), scaling.apply_y(data.y))


def argmin_targets(
    arch: PcfArchitecture,
    data: Dataset,
    reg: RegularizationConfig,
    scaling: Scaling | None,
    target: ArgminTarget | None,
) -> ArgminTargets | None:
    """Argmin penalty targets in the space the network is trained in, one row per distinct training theta."""
    if reg.rho_min == 0.0:
        return None
    if arch.activation != Activation.softplus:
        raise UnsupportedCombinationError(
            "The argmin regularizer (rho_min > 0) needs a softplus network, got activation "
            + f"'{arch.activation.value}'."
        )

    if arch.p == 0:
        thetas, counts = np.zeros((1, 0)), np.array([data.size])
    else:
        thetas, counts = np.unique(data.theta, axis=0, return_counts=True)
    if target is not None:
        points, tilts = target(thetas)
    elif reg.argmin_point is not None:
        points = np.tile(np.asarray(reg.argmin_point, dtype=float), (thetas.shape[0], 1))
        tilts = None if reg.argmin_tilt is None else np.tile(np.asarray(reg.argmin_tilt), (thetas.shape[0], 1))
    else:
        raise InvalidInputError("rho_min > 0 requires an argmin point g(theta).", name="argmin_point")

    points = np.asarray(points, dtype=float).reshape(thetas.shape[0], -1)
    if points.shape[1] != arch.n:
        raise InvalidInputError(
            f"Argmin point has {points.shape[1]} entries, expected n={arch.n}.", name="argmin_point"
        )
    if tilts is not None:
        tilts = np.asarray(tilts, dtype=float).reshape(thetas.shape[0], arch.n)
        if np.all(tilts == 0.0):
            tilts = None

    if scaling is not None:
        points = scaling.apply_x(points)
        thetas = scaling.apply_theta(thetas)
        if tilts is not None:
            # grad of the standardized model = (x_scale / y_scale) * grad of the original one
            tilts = tilts[:, None, :] * scaling.x_scale[None, None, :] / scaling.y_scale[None, :, None]

    return ArgminTargets(thetas=thetas, points=points, tilts=tilts, rho_min=reg.rho_min, weights=counts.astype(float))


@dataclasses.dataclass(frozen=True)
class StartResult:
    outcome: StartOutcome
    weights: np.ndarray | None


def minibatches(size: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index blocks, one seeded permutation per epoch."""
    while True:
        order = rng.permutation(size)
        for start in range(0, size, batch_size):
            yield order[start : start + batch_size]


def run_start(
    index: int,
    seed: np.random.SeedSequence,
    arch: PcfArchitecture,
    train: Dataset,
    loss: LossConfig,
    reg: RegularizationConfig,
    cfg: TrainConfig,
    argmin: ArgminTargets | None,
) -> StartResult:
    rng = np.random.default_rng(seed)
    w = init_weights(arch, rng)
    objective = functools.partial(
        objective_and_grad, arch, loss=loss, reg=reg, argmin=argmin, block_size=cfg.block_size
    )

    def full_objective(v: np.ndarray) -> tuple[float, np.ndarray]:
        return objective(v, train)

    try:
        adam = Adam(lr=cfg.adam_lr)
        if cfg.full_batch:
            for _ in range(cfg.adam_iters):
                _, grad = full_objective(w)
                w = adam.step(w, grad)
        else:
            batches = minibatches(train.size, cfg.batch_size, rng)
            for _ in range(cfg.adam_iters):
                _, grad = objective(w, train.take(next(batches)))
                w = adam.step(w, grad)
        if not np.all(np.isfinite(w)):
            raise NonFiniteError("Weights diverged during the Adam warm-up.")
        adam_value, _ = full_objective(w)
        logger.debug("start %d: objective %.6e after %d Adam steps", index, adam_value, cfg.adam_iters)

        result = minimize_lbfgs(
            full_objective, w, max_iter=cfg.lbfgs_iters, memory=cfg.lbfgs_memory, max_evals=cfg.lbfgs_max_evals
        )
    except NonFiniteError as e:
        logger.warning("start %d failed: %s", index, e)
        return StartResult(StartOutcome(index=index, failed=True, message=str(e)), None)

    logger.info("start %d: objective %.6e (%s)", index, result.fun, result.message)
    if result.budget_exhausted and result.iterations < cfg.lbfgs_iters:
        logger.info(
            "start %d: L-BFGS used its %d-evaluation budget after %d of %d iterations",
            index,
            result.evaluations,
            result.iterations,
            cfg.lbfgs_iters,
        )
    outcome = StartOutcome(
        index=index,
        failed=False,
        adam_objective=adam_value,
        objective=result.fun,
        lbfgs_iterations=result.iterations,
        evaluations=result.evaluations,
        message=result.message,
    )
    return StartResult(outcome, result.x)


def check_fit_inputs(arch: PcfArchitecture, data: Dataset, loss: LossConfig):
    if data.size == 0:
        raise InvalidInputError("Training data is empty.", name="data")
    for name, expected, actual in (("n", arch.n, data.n), ("p", arch.p, data.p), ("d", arch.d, data.d)):
        if expected != actual:
            raise InvalidInputError(
                f"Data has {name}={actual} but the architecture expects {name}={expected}.", name=name
            )
    if loss.kind == LossKind.logistic:
        check_labels(data.y)


def fit(
    arch: PcfArchitecture,
    data: Dataset,
    loss: LossConfig,
    reg: RegularizationConfig,
    cfg: TrainConfig,
    argmin_target: ArgminTarget | None = None,
) -> tuple[PcfModel, FitReport]:
    """Multi-start fit: every start runs the Adam warm-up then L-BFGS; the lowest training objective wins."""
    check_fit_inputs(arch, data, loss)

    scaling = None
    if arch.scaling:
        scaling = Scaling.fit(data.x, data.theta, data.y, scale_y=loss.kind != LossKind.logistic)
    train = standardize(data, scaling)
    argmin = argmin_targets(arch, data, reg, scaling, argmin_target)

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.starts)
    task = functools.partial(run_start, arch=arch, train=train, loss=loss, reg=reg, cfg=cfg, argmin=argmin)
    with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
        results = list(pool.map(task, range(cfg.starts), seeds))

    finished = [result for result in results if not result.outcome.failed]
    if len(finished) == 0:
        raise FitFailedError(f"All {cfg.starts} starts failed; see the log for the individual errors.")

    best = min(finished, key=lambda result: (result.outcome.objective, result.outcome.index))
    model = PcfModel(arch, best.weights, scaling)
    report = FitReport(
        chosen_lambda=reg.lambda_,
        lambda_grid=[reg.lambda_],
        starts=[result.outcome for result in results],
        best_start=best.outcome.index,
        train_objective=best.outcome.objective,
    )
    return model, report
