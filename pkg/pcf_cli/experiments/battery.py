"""Battery aging rate as a function of charge and charge rate, parametrized by throughput, capacity and temperature.

    f(x, theta) = z A^(z-1) b (alpha q / Q + beta) exp((-E_a + eta b / Q) / (R_g (T_0 + T)))

with x = (q, b) and theta = (A, Q, T). The short-term baseline is the first-order expansion of f at
(q, b) = (Q/2, 0): mu (1 + nu Q / 2) b.
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
SIZES = {Scale.smoke: (5, 10, 3), Scale.desk: (300, 100, 100), Scale.full: (1000, 100, 1000)}

SETTINGS = {
    "architecture": {"activation": "softplus", "widths": [5, 5], "psi_widths": [10], "scaling": True},
    "training": {"adam_iters": 1000, "lbfgs_iters": 4000},
}

# throughput starts at 1: A^(z-1) is singular at 0
THROUGHPUT_RANGE = (1.0, 50.0)
TEMPERATURE_RANGE = (10.0, 50.0)
CHARGE_RANGE = (0.2, 0.8)
RATE_RANGE = (0.0, 30.0)


@dataclasses.dataclass(frozen=True)
class BatteryConstants:
    E_a: float = 31500.0
    R_g: float = 8.3145
    T0: float = 273.15
    alpha: float = 28.966
    beta: float = 74.112
    z: float = 0.6
    eta: float = 152.5
    Q: float = 1.0


def _split(x: np.ndarray, theta: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    return x[:, 0], x[:, 1], theta[:, 0], theta[:, 1], theta[:, 2]


def battery_true(x: np.ndarray, theta: np.ndarray, constants: BatteryConstants = BatteryConstants()) -> np.ndarray:
    q, b, A, Q, T = _split(x, theta)
    c = constants
    exponent = (-c.E_a + c.eta * b / Q) / (c.R_g * (c.T0 + T))
    return c.z * A ** (c.z - 1.0) * b * (c.alpha * q / Q + c.beta) * np.exp(exponent)


def short_coefficients(theta: np.ndarray, constants: BatteryConstants = BatteryConstants()):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    A, Q, T = theta[:, 0], theta[:, 1], theta[:, 2]
    c = constants
    mu = c.beta * np.exp(-c.E_a / (c.R_g * (c.T0 + T))) * c.z * A ** (c.z - 1.0)
    nu = c.alpha / (c.beta * Q)
    return mu, nu


def battery_short(x: np.ndarray, theta: np.ndarray, constants: BatteryConstants = BatteryConstants()) -> np.ndarray:
    _, b, _, Q, _ = _split(x, theta)
    mu, nu = short_coefficients(theta, constants)
    return mu * (1.0 + nu * Q / 2.0) * b


def gen_battery(
    n_theta: int, n_x: int, rng: np.random.Generator, constants: BatteryConstants = BatteryConstants()
) -> Dataset:
    if n_theta < 1 or n_x < 1:
        raise ValueError(f"Need at least one theta and one x, got {n_theta} and {n_x}.")
    A = rng.uniform(*THROUGHPUT_RANGE, size=n_theta)
    T = rng.uniform(*TEMPERATURE_RANGE, size=n_theta)
    thetas = np.repeat(np.column_stack([A, np.full(n_theta, constants.Q), T]), n_x, axis=0)
    x = np.column_stack(
        [rng.uniform(*CHARGE_RANGE, size=n_theta * n_x), rng.uniform(*RATE_RANGE, size=n_theta * n_x)]
    )
    return Dataset.create(x, thetas, battery_true(x, thetas, constants))


def run(config: ExperimentConfig) -> dict:
    n_theta, n_x, n_test = SIZES[config.scale]
    train = gen_battery(n_theta, n_x, config.rng(0))
    test = gen_battery(n_test, n_x, config.rng(1))

    model, report = fit_experiment(config, SETTINGS, train)
    y_pred = evaluate(model, test.x, test.theta)[:, 0]
    y_short = battery_short(test.x, test.theta)
    y_true = test.y[:, 0]

    write_columns(
        config.out / "predictions.csv",
        {
            "q": test.x[:, 0],
            "b": test.x[:, 1],
            "A": test.theta[:, 0],
            "Q": test.theta[:, 1],
            "T": test.theta[:, 2],
            "y_true": y_true,
            "y_pred": y_pred,
            "y_short": y_short,
        },
    )
    rmse_pcf = rmse_where(y_pred, y_true)
    rmse_short = rmse_where(y_short, y_true)
    return {
        "train_samples": train.size,
        "test_samples": test.size,
        "train_objective": report.train_objective,
        "rmse_pcf": rmse_pcf,
        "rmse_short": rmse_short,
        "improvement": rmse_short / rmse_pcf if rmse_pcf > 0.0 else None,
        "y_max": float(y_true.max()),
    }
