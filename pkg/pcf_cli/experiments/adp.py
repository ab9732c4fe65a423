"""Approximate dynamic programming for the pendulum swing-up.

Open-loop problems solved from sampled initial states give tail costs along every trajectory; a
PCF fitted to them (state as variable, mass as parameter) is the value surrogate of a one-step
controller u = argmin_u H(z, u) + f(F(z) + G u, m), a convex problem in u.
"""

import functools
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.optimize import brentq

from pcf_cli.data import Dataset
from pcf_cli.error import BracketError
from pcf_cli.error import NonFiniteError
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.experiments.harness import fit_experiment
from pcf_cli.experiments.harness import rmse_where
from pcf_cli.experiments.harness import write_columns
from pcf_cli.experiments.pendulum import OcpResult
from pcf_cli.experiments.pendulum import PendulumSystem
from pcf_cli.experiments.pendulum import solve_ocp
from pcf_cli.model import PcfModel
from pcf_cli.model import evaluate
from pcf_cli.model import grad_x
from pcf_cli.types import Scale

logger = logging.getLogger(__name__)

# (OCP samples, horizon, closed-loop steps, held-out OCP samples)
SIZES = {Scale.smoke: (4, 10, 20, 2), Scale.desk: (300, 60, 300, 30), Scale.full: (1000, 150, 300, 100)}

ANGLE_RANGE = (-np.pi / 6.0, 7.0 * np.pi / 6.0)
VELOCITY_RANGE = (-1.0, 1.0)
MASS_RANGE = (0.5, 2.0)
EQUILIBRIUM = (np.pi, 0.0)
DEFAULT_U_MAX = 50.0

# closed-loop target region around the upright equilibrium
ANGLE_TOLERANCE = 0.3
VELOCITY_TOLERANCE = 1.0

SETTINGS = {
    "architecture": {
        "activation": "softplus",
        "widths": [20, 20],
        "psi_widths": [10, 10],
        "quadratic": "full",
    },
    "regularization": {
        "kind": "elastic_net",
        "lambda": 1.0,
        "alpha_l2": 1e-8,
        "alpha_l1": 0.1,
        "rho_min": 10.0,
        "argmin_point": list(EQUILIBRIUM),
    },
    "training": {"n_starts": 16, "adam_iters": 1000, "lbfgs_iters": 5000, "lbfgs_max_evals": 5000},
}


def step_cost_slope(value_model: PcfModel, system: PendulumSystem, z: np.ndarray, mass: float, u: float) -> float:
    """d/du of H(z, u) + f(F(z) + G u, m)."""
    z_next = system.step(z, u, mass)
    gradient = grad_x(value_model, z_next, np.array([mass]))[0]
    return float(2.0 * system.input_weight * u + gradient @ system.input_gain(mass))


def adp_step(
    value_model: PcfModel, system: PendulumSystem, z: np.ndarray, mass: float, u_max: float = DEFAULT_U_MAX
) -> float:
    """Minimizer of the convex one-step cost on [-u_max, u_max]; the bracket is doubled once if needed."""
    z = np.asarray(z, dtype=float)
    slope = functools.partial(step_cost_slope, value_model, system, z, mass)
    bound = u_max
    for _ in range(2):
        low, high = slope(-bound), slope(bound)
        if low == 0.0:
            return -bound
        if high == 0.0:
            return bound
        if low < 0.0 < high:
            return float(brentq(slope, -bound, bound, xtol=1e-12, maxiter=200))
        bound *= 2.0
    bound /= 2.0
    raise BracketError(f"One-step cost slope does not change sign on [-{bound}, {bound}] at z={z.tolist()}.")


def step_cost(value_model: PcfModel, system: PendulumSystem, z: np.ndarray, mass: float, u: float) -> float:
    z_next = system.step(z, u, mass)
    return float(system.stage_cost(z, u) + evaluate(value_model, z_next, np.array([mass]))[0])


def closed_loop(
    value_model: PcfModel,
    system: PendulumSystem,
    z0: np.ndarray,
    mass: float,
    steps: int,
    u_max: float = DEFAULT_U_MAX,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate the ADP controller; returns states (steps + 1, 2) and inputs (steps,)."""
    states = np.empty((steps + 1, 2))
    inputs = np.empty(steps)
    states[0] = z0
    for t in range(steps):
        inputs[t] = adp_step(value_model, system, states[t], mass, u_max)
        states[t + 1] = system.step(states[t], inputs[t], mass)
    return states, inputs


def first_arrival(states: np.ndarray) -> int | None:
    near = (np.abs(states[:, 0] - EQUILIBRIUM[0]) <= ANGLE_TOLERANCE) & (np.abs(states[:, 1]) <= VELOCITY_TOLERANCE)
    hits = np.flatnonzero(near)
    return None if len(hits) == 0 else int(hits[0])


def sample_initial_conditions(rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
    z0 = np.column_stack([rng.uniform(*ANGLE_RANGE, size=count), rng.uniform(*VELOCITY_RANGE, size=count)])
    return z0, rng.uniform(*MASS_RANGE, size=count)


def _solve(system: PendulumSystem, horizon: int, z0: np.ndarray, mass: float) -> OcpResult | None:
    try:
        return solve_ocp(system, z0, mass, horizon)
    except NonFiniteError as e:
        logger.warning("excluding sample: %s", e)
        return None


def solve_samples(
    system: PendulumSystem, z0: np.ndarray, masses: np.ndarray, horizon: int, n_workers: int
) -> list[OcpResult | None]:
    task = functools.partial(_solve, system, horizon)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(task, z0, masses))


def tail_cost_dataset(results: list[OcpResult | None], masses: np.ndarray) -> Dataset:
    """Every visited state of every solved sample, with its tail cost as the value target."""
    xs, thetas, ys = [], [], []
    for result, mass in zip(results, masses, strict=True):
        if result is None:
            continue
        xs.append(result.states[:-1])
        thetas.append(np.full(len(result.inputs), mass))
        ys.append(result.tail_costs)
    if len(xs) == 0:
        raise NonFiniteError("Every open-loop sample failed.")
    return Dataset.create(np.concatenate(xs), np.concatenate(thetas), np.concatenate(ys))


def first_inputs(
    value_model: PcfModel, system: PendulumSystem, z0: np.ndarray, masses: np.ndarray, results: list
) -> tuple[np.ndarray, np.ndarray]:
    pairs = [
        (result.inputs[0], adp_step(value_model, system, z, mass))
        for z, mass, result in zip(z0, masses, results, strict=True)
        if result is not None
    ]
    if len(pairs) == 0:
        return np.zeros(0), np.zeros(0)
    optimal, adp = zip(*pairs, strict=True)
    return np.asarray(optimal), np.asarray(adp)


def run(config: ExperimentConfig) -> dict:
    n_samples, horizon, steps, n_test = SIZES[config.scale]
    system = PendulumSystem()

    z0, masses = sample_initial_conditions(config.rng(0), n_samples)
    results = solve_samples(system, z0, masses, horizon, config.n_workers)
    data = tail_cost_dataset(results, masses)
    model, report = fit_experiment(config, SETTINGS, data)

    test_z0, test_masses = sample_initial_conditions(config.rng(1), n_test)
    test_results = solve_samples(system, test_z0, test_masses, horizon, config.n_workers)
    train_optimal, train_adp = first_inputs(model, system, z0[:n_test], masses[:n_test], results[:n_test])
    test_optimal, test_adp = first_inputs(model, system, test_z0, test_masses, test_results)
    write_columns(
        config.out / "inputs.csv",
        {
            "test": np.concatenate([np.zeros(len(train_optimal)), np.ones(len(test_optimal))]),
            "u_optimal": np.concatenate([train_optimal, test_optimal]),
            "u_adp": np.concatenate([train_adp, test_adp]),
        },
    )

    start = np.zeros(2)
    states, inputs = closed_loop(model, system, start, 1.0, steps)
    ocp = solve_ocp(system, start, 1.0, horizon)
    write_columns(
        config.out / "closed_loop.csv",
        {"t": np.arange(steps), "delta": states[:-1, 0], "velocity": states[:-1, 1], "u": inputs},
    )
    write_columns(
        config.out / "open_loop.csv",
        {"t": np.arange(horizon), "delta": ocp.states[:-1, 0], "velocity": ocp.states[:-1, 1], "u": ocp.inputs},
    )

    closed_cost = float(np.sum(system.stage_cost(states[:horizon], inputs[:horizon])))
    masses_seen = np.unique(data.theta, axis=0)
    equilibrium = np.tile(EQUILIBRIUM, (len(masses_seen), 1))
    gradient_norms = np.linalg.norm(grad_x(model, equilibrium, masses_seen)[:, 0, :], axis=1)
    return {
        "samples": n_samples,
        "failed_samples": sum(result is None for result in results),
        "train_samples": data.size,
        "train_objective": report.train_objective,
        "rmse_u0_train": rmse_where(train_adp, train_optimal),
        "rmse_u0_test": rmse_where(test_adp, test_optimal),
        "open_loop_cost": ocp.cost,
        "closed_loop_cost": closed_cost,
        "cost_ratio": closed_cost / ocp.cost if ocp.cost > 0.0 else None,
        "arrival_step": first_arrival(states),
        "final_angle": float(states[-1, 0]),
        "final_velocity": float(states[-1, 1]),
        "mean_equilibrium_gradient": float(np.mean(gradient_norms)),
    }
