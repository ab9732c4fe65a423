"""Parametrized convex sets: axis-aligned ellipses C(theta) = {x | sum_i ((x_i - c_i) / r_i)^2 <= 1}.

theta = (c_1, c_2, r_1, r_2). Points inside C(theta) carry label -1 and points outside +1, so the
fitted sublevel set {x | f(x, theta) <= 0} approximates C(theta). Under the loss log(1 + exp(-y f)) a
negative f predicts -1, which is the inside.
"""

import numpy as np

from pcf_cli.data import Dataset
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.experiments.harness import fit_experiment
from pcf_cli.experiments.harness import write_columns
from pcf_cli.model import evaluate
from pcf_cli.training import error_rate
from pcf_cli.types import Scale

# (training thetas, points per theta, test thetas)
SIZES = {Scale.smoke: (5, 10, 2), Scale.desk: (200, 50, 50), Scale.full: (1000, 100, 200)}

CENTER_RANGE = (-0.5, 0.5)
RADIUS_RANGE = (0.5, 1.5)
BOX = (-2.0, 2.0)

SETTINGS = {
    "architecture": {"activation": "softplus", "scaling": True},
    "loss": {"kind": "logistic"},
}


def ellipse_labels(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    theta = np.atleast_2d(theta)
    radius = np.sum(((x - theta[:, :2]) / theta[:, 2:]) ** 2, axis=1)
    return np.where(radius <= 1.0, -1.0, 1.0)


def gen_ellipse(n_theta: int, n_x: int, rng: np.random.Generator) -> Dataset:
    if n_theta < 1 or n_x < 1:
        raise ValueError(f"Need at least one theta and one x, got {n_theta} and {n_x}.")
    centers = rng.uniform(*CENTER_RANGE, size=(n_theta, 2))
    radii = rng.uniform(*RADIUS_RANGE, size=(n_theta, 2))
    theta = np.repeat(np.column_stack([centers, radii]), n_x, axis=0)
    x = rng.uniform(*BOX, size=(n_theta * n_x, 2))
    return Dataset.create(x, theta, ellipse_labels(x, theta))


def run(config: ExperimentConfig) -> dict:
    n_theta, n_x, n_test = SIZES[config.scale]
    train = gen_ellipse(n_theta, n_x, config.rng(0))
    test = gen_ellipse(n_test, n_x, config.rng(1))

    model, report = fit_experiment(config, SETTINGS, train)
    f = evaluate(model, test.x, test.theta)[:, 0]
    write_columns(
        config.out / "predictions.csv",
        {
            "x0": test.x[:, 0],
            "x1": test.x[:, 1],
            **{f"th{i}": test.theta[:, i] for i in range(4)},
            "label": test.y[:, 0],
            "f": f,
        },
    )
    return {
        "train_samples": train.size,
        "test_samples": test.size,
        "train_objective": report.train_objective,
        "train_error_rate": error_rate(model, train),
        "test_error_rate": error_rate(model, test),
        "inside_fraction": float(np.mean(test.y[:, 0] < 0.0)),
    }
