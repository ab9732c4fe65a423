"""Parametrized quadratic forms f(x, theta) = x' P x with P positive semidefinite.

P = S'S / sqrt(n) with S uniform on [-1, 1]^(n x n); the model sees its upper-triangular entries.
"""

import numpy as np

from pcf_cli.data import Dataset
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.experiments.harness import fit_experiment
from pcf_cli.experiments.harness import rmse_where
from pcf_cli.experiments.harness import write_columns
from pcf_cli.model import evaluate
from pcf_cli.types import Scale

# (training thetas, x points per theta, test thetas)
SIZES = {Scale.smoke: (5, 10, 3), Scale.desk: (300, 100, 100), Scale.full: (1000, 100, 1000)}

SETTINGS = {"architecture": {"activation": "softplus"}}


def psd_matrix(S: np.ndarray) -> np.ndarray:
    n = S.shape[-1]
    P = S.T @ S / np.sqrt(n)
    return 0.5 * (P + P.T)


def upper_entries(P: np.ndarray) -> np.ndarray:
    return P[np.triu_indices(P.shape[-1])]


def from_upper_entries(entries: np.ndarray, n: int) -> np.ndarray:
    P = np.zeros((n, n))
    P[np.triu_indices(n)] = entries
    return P + np.triu(P, 1).T


def unit_ball(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    """Uniform samples from the n-dimensional unit ball."""
    directions = rng.standard_normal((count, n))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / n)


def quadratic_true(x: np.ndarray, P: np.ndarray) -> np.ndarray:
    """x' P x for one P and a batch of x, or one P per row."""
    x = np.atleast_2d(x)
    if P.ndim == 2:
        return np.einsum("bi,ij,bj->b", x, P, x)
    return np.einsum("bi,bij,bj->b", x, P, x)


def gen_quadratic(n_theta: int, n_x: int, rng: np.random.Generator, n_dim: int = 3) -> Dataset:
    if n_theta < 1 or n_x < 1:
        raise ValueError(f"Need at least one theta and one x, got {n_theta} and {n_x}.")
    xs, thetas, ys = [], [], []
    for _ in range(n_theta):
        P = psd_matrix(rng.uniform(-1.0, 1.0, size=(n_dim, n_dim)))
        x = unit_ball(rng, n_x, n_dim)
        xs.append(x)
        thetas.append(np.tile(upper_entries(P), (n_x, 1)))
        ys.append(quadratic_true(x, P))
    return Dataset.create(np.concatenate(xs), np.concatenate(thetas), np.concatenate(ys))


def run(config: ExperimentConfig) -> dict:
    n_theta, n_x, n_test = SIZES[config.scale]
    train = gen_quadratic(n_theta, n_x, config.rng(0))
    test = gen_quadratic(n_test, n_x, config.rng(1))

    model, report = fit_experiment(config, SETTINGS, train)
    y_pred = evaluate(model, test.x, test.theta)[:, 0]
    y_true = test.y[:, 0]

    columns = {f"x{i}": test.x[:, i] for i in range(test.n)}
    columns.update({f"th{i}": test.theta[:, i] for i in range(test.p)})
    write_columns(config.out / "predictions.csv", {**columns, "y_true": y_true, "y_pred": y_pred})
    return {
        "train_samples": train.size,
        "test_samples": test.size,
        "train_objective": report.train_objective,
        "rmse": rmse_where(y_pred, y_true),
        "y_min": float(y_true.min()),
        "y_max": float(y_true.max()),
    }
