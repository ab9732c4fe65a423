"""Piecewise affine functions of a scalar x, convex only for part of the parameter range.

    f(x, theta) = s_plus * max(0, x - m) + s_minus * max(0, m - x) + v,   theta = (s_plus, s_minus, m, v)

f is convex in x when s_plus >= -s_minus. For the other parameters the closest convex function is the
best affine fit of the slice, which is what a convex model should learn there.
"""

import dataclasses

import numpy as np

from pcf_cli.data import Dataset
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.experiments.harness import fit_experiment
from pcf_cli.experiments.harness import rmse_where
from pcf_cli.experiments.harness import write_columns
from pcf_cli.model import evaluate
from pcf_cli.types import Scale

# (training thetas, x points per theta, test thetas)
SIZES = {Scale.smoke: (6, 10, 4), Scale.desk: (400, 50, 100), Scale.full: (2000, 50, 2000)}

SETTINGS = {"loss": {"kind": "quadratic"}}


@dataclasses.dataclass(frozen=True, eq=False)
class PwaData:
    data: Dataset
    convex: np.ndarray
    affine: np.ndarray


def pwa_true(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    theta = np.atleast_2d(theta)
    s_plus, s_minus, m, v = theta.T
    return s_plus * np.maximum(0.0, x - m) + s_minus * np.maximum(0.0, m - x) + v


def convex_mask(theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(theta)
    return theta[:, 0] >= -theta[:, 1]


def best_affine(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares affine fit of one slice, evaluated at x."""
    A = np.column_stack([x, np.ones_like(x)])
    coefficients, *_ = np.linalg.lstsq(A, y, rcond=None)
    return A @ coefficients


def gen_pwa(n_theta: int, n_x: int, rng: np.random.Generator, random_x: bool = False) -> PwaData:
    """Thetas uniform on [-1, 1]^4, n_x points per theta on [-1, 1] (equispaced, or uniform when random_x)."""
    if n_theta < 1 or n_x < 1:
        raise ValueError(f"Need at least one theta and one x, got {n_theta} and {n_x}.")
    thetas = rng.uniform(-1.0, 1.0, size=(n_theta, 4))
    xs, theta_rows, ys, affine = [], [], [], []
    for theta in thetas:
        x = rng.uniform(-1.0, 1.0, size=n_x) if random_x else np.linspace(-1.0, 1.0, n_x)
        y = pwa_true(x, np.tile(theta, (n_x, 1)))
        xs.append(x)
        theta_rows.append(np.tile(theta, (n_x, 1)))
        ys.append(y)
        affine.append(best_affine(x, y) if n_x > 1 else y)

    theta = np.concatenate(theta_rows)
    data = Dataset.create(np.concatenate(xs), theta, np.concatenate(ys))
    return PwaData(data=data, convex=convex_mask(theta), affine=np.concatenate(affine))


def run(config: ExperimentConfig) -> dict:
    n_theta, n_x, n_test = SIZES[config.scale]
    train = gen_pwa(n_theta, n_x, config.rng(0))
    test = gen_pwa(n_test, n_x, config.rng(1), random_x=True)

    model, report = fit_experiment(config, SETTINGS, train.data)
    y_pred = evaluate(model, test.data.x, test.data.theta)[:, 0]
    y_true = test.data.y[:, 0]

    write_columns(
        config.out / "predictions.csv",
        {
            "x0": test.data.x[:, 0],
            **{f"th{i}": test.data.theta[:, i] for i in range(4)},
            "y_true": y_true,
            "y_pred": y_pred,
            "y_affine": test.affine,
            "convex": test.convex,
        },
    )
    nonconvex = ~test.convex
    return {
        "train_samples": train.data.size,
        "test_samples": test.data.size,
        "train_objective": report.train_objective,
        "rmse_all": rmse_where(y_pred, y_true),
        "rmse_convex": rmse_where(y_pred, y_true, test.convex),
        "rmse_nonconvex": rmse_where(y_pred, y_true, nonconvex),
        "rmse_nonconvex_vs_affine": rmse_where(y_pred, test.affine, nonconvex),
    }
