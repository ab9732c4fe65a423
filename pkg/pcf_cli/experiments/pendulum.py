"""Damped pendulum in input-affine discrete time and open-loop optimal control on a finite horizon.

Continuous dynamics m l^2 dd(delta) + b d(delta) + m g l sin(delta) = u, discretized with forward Euler:

    z+ = F(z, m) + G(m) u,   F = (delta + h d(delta), d(delta) + h (-b d(delta) - m g l sin delta) / (m l^2)),
    G = (0, h / (m l^2))
"""

import dataclasses
import logging

import numpy as np

from pcf_cli.error import NonFiniteError
from pcf_cli.optim import minimize_lbfgs

logger = logging.getLogger(__name__)

TARGET_ANGLE = np.pi


@dataclasses.dataclass(frozen=True)
class PendulumSystem:
    length: float = 1.0
    damping: float = 0.05
    gravity: float = 9.81
    sample_time: float = 0.02
    angle_weight: float = 1.0
    velocity_weight: float = 0.01
    input_weight: float = 0.001

    def drift(self, z: np.ndarray, mass: float) -> np.ndarray:
        delta, velocity = z[..., 0], z[..., 1]
        h, inertia = self.sample_time, mass * self.length**2
        acceleration = (-self.damping * velocity - mass * self.gravity * self.length * np.sin(delta)) / inertia
        return np.stack([delta + h * velocity, velocity + h * acceleration], axis=-1)

    def input_gain(self, mass: float) -> np.ndarray:
        return np.array([0.0, self.sample_time / (mass * self.length**2)])

    def step(self, z: np.ndarray, u: float, mass: float) -> np.ndarray:
        return self.drift(z, mass) + self.input_gain(mass) * u

    def drift_jacobian(self, z: np.ndarray, mass: float) -> np.ndarray:
        h = self.sample_time
        inertia = mass * self.length**2
        return np.array(
            [
                [1.0, h],
                [-h * mass * self.gravity * self.length * np.cos(z[0]) / inertia, 1.0 - h * self.damping / inertia],
            ]
        )

    def stage_cost(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        delta, velocity = z[..., 0], z[..., 1]
        return (
            self.angle_weight * (delta - TARGET_ANGLE) ** 2
            + self.velocity_weight * velocity**2
            + self.input_weight * np.asarray(u) ** 2
        )

    def stage_cost_state_grad(self, z: np.ndarray) -> np.ndarray:
        return np.array([2.0 * self.angle_weight * (z[0] - TARGET_ANGLE), 2.0 * self.velocity_weight * z[1]])

    def rollout(self, z0: np.ndarray, inputs: np.ndarray, mass: float) -> np.ndarray:
        states = np.empty((len(inputs) + 1, 2))
        states[0] = z0
        for t, u in enumerate(inputs):
            states[t + 1] = self.step(states[t], u, mass)
        return states


@dataclasses.dataclass(frozen=True, eq=False)
class OcpResult:
    """Open-loop solution; tail_costs[t] is the cost from step t to the horizon, a value sample at states[t]."""

    inputs: np.ndarray
    states: np.ndarray
    tail_costs: np.ndarray
    converged: bool
    message: str

    @property
    def cost(self) -> float:
        return float(self.tail_costs[0])


def horizon_cost_and_grad(
    system: PendulumSystem, z0: np.ndarray, mass: float, inputs: np.ndarray
) -> tuple[float, np.ndarray]:
    """Total stage cost of the rollout and its gradient with respect to the inputs (adjoint recursion)."""
    states = system.rollout(z0, inputs, mass)
    costs = system.stage_cost(states[:-1], inputs)
    value = float(np.sum(costs))
    if not np.isfinite(value):
        raise NonFiniteError("Pendulum rollout diverged.")

    gain = system.input_gain(mass)
    grad = np.empty_like(inputs)
    adjoint = np.zeros(2)
    for t in reversed(range(len(inputs))):
        grad[t] = 2.0 * system.input_weight * inputs[t] + gain @ adjoint
        adjoint = system.stage_cost_state_grad(states[t]) + system.drift_jacobian(states[t], mass).T @ adjoint
    return value, grad


def tail_costs(system: PendulumSystem, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    costs = system.stage_cost(states[:-1], inputs)
    return np.cumsum(costs[::-1])[::-1]


def solve_ocp(
    system: PendulumSystem,
    z0: np.ndarray,
    mass: float,
    horizon: int,
    max_iter: int = 500,
    tolerance_grad: float = 1e-4,
    initial_inputs: np.ndarray | None = None,
) -> OcpResult:
    """Locally minimize the horizon cost over the open-loop inputs with L-BFGS; retries once from zero input."""
    if horizon < 1:
        raise ValueError(f"Horizon must be at least 1, got {horizon}.")
    z0 = np.asarray(z0, dtype=float)

    def objective(inputs: np.ndarray) -> tuple[float, np.ndarray]:
        return horizon_cost_and_grad(system, z0, mass, inputs)

    starts = [np.zeros(horizon)]
    if initial_inputs is not None:
        starts.insert(0, np.asarray(initial_inputs, dtype=float))

    for start in starts:
        try:
            result = minimize_lbfgs(objective, start, max_iter=max_iter, tolerance_grad=tolerance_grad)
        except NonFiniteError as e:
            logger.warning("OCP from z0=%s, m=%.3f failed: %s", z0.tolist(), mass, e)
            continue
        states = system.rollout(z0, result.x, mass)
        return OcpResult(
            inputs=result.x,
            states=states,
            tail_costs=tail_costs(system, states, result.x),
            converged=result.converged,
            message=result.message,
        )
    raise NonFiniteError(f"OCP from z0={z0.tolist()}, m={mass:.3f} failed from every initialization.")
