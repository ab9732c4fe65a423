import json
import math

import numpy as np
import pytest

from pcf_cli.error import BracketError
from pcf_cli.error import NonFiniteError
from pcf_cli.experiments import run_experiment
from pcf_cli.experiments.adp import adp_step
from pcf_cli.experiments.adp import closed_loop
from pcf_cli.experiments.adp import first_arrival
from pcf_cli.experiments.adp import step_cost
from pcf_cli.experiments.adp import tail_cost_dataset
from pcf_cli.experiments.battery import BatteryConstants
from pcf_cli.experiments.battery import battery_short
from pcf_cli.experiments.battery import battery_true
from pcf_cli.experiments.battery import gen_battery
from pcf_cli.experiments.ellipse import ellipse_labels
from pcf_cli.experiments.ellipse import gen_ellipse
from pcf_cli.experiments.harness import ExperimentConfig
from pcf_cli.experiments.harness import rmse_where
from pcf_cli.experiments.pendulum import OcpResult
from pcf_cli.experiments.pendulum import PendulumSystem
from pcf_cli.experiments.pendulum import horizon_cost_and_grad
from pcf_cli.experiments.pendulum import solve_ocp
from pcf_cli.experiments.pendulum import tail_costs
from pcf_cli.experiments.pwa import best_affine
from pcf_cli.experiments.pwa import convex_mask
from pcf_cli.experiments.pwa import gen_pwa
from pcf_cli.experiments.pwa import pwa_true
from pcf_cli.experiments.quadratic import from_upper_entries
from pcf_cli.experiments.quadratic import gen_quadratic
from pcf_cli.experiments.quadratic import psd_matrix
from pcf_cli.experiments.quadratic import quadratic_true
from pcf_cli.experiments.quadratic import unit_ball
from pcf_cli.experiments.quadratic import upper_entries
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.types import ExperimentName
from pcf_cli.types import Scale


def velocity_value_model(slope: float) -> PcfModel:
    """f(z, m) = slope * velocity, whatever the mass."""
    arch = PcfArchitecture.create(n=2, p=1, d=1, widths=[3, 3], psi_widths=[4])
    w = np.zeros(arch.weight_count)
    w[arch.psi_layout.layers[-1].c.offset + arch.emitted_layout.block("V3").offset + 1] = slope
    return PcfModel(arch, w)


class TestPwa:
    def test_true_function(self):
        assert pwa_true(0.5, [1.0, 1.0, 0.0, 0.0])[0] == 0.5
        assert pwa_true(-0.5, [1.0, 2.0, 0.0, 0.25])[0] == 1.25

    def test_convexity(self):
        theta = np.array([[1.0, -0.5, 0.0, 0.0], [-1.0, 0.5, 0.0, 0.0], [-0.5, 0.5, 0.3, 0.0]])

        np.testing.assert_array_equal(convex_mask(theta), [True, False, True])

    def test_best_affine_reproduces_a_line(self):
        x = np.linspace(-1.0, 1.0, 7)

        np.testing.assert_allclose(best_affine(x, 2.0 * x - 1.0), 2.0 * x - 1.0, atol=1e-12)

    def test_generated_data(self):
        generated = gen_pwa(3, 5, np.random.default_rng(0))

        assert generated.data.size == 15
        assert generated.data.p == 4
        np.testing.assert_array_equal(generated.data.x[:5, 0], np.linspace(-1.0, 1.0, 5))
        np.testing.assert_allclose(generated.data.y[:, 0], pwa_true(generated.data.x, generated.data.theta))


class TestQuadratic:
    def test_psd(self):
        P = psd_matrix(np.random.default_rng(0).uniform(-1.0, 1.0, size=(3, 3)))

        assert np.all(np.linalg.eigvalsh(P) >= -1e-12)
        np.testing.assert_array_equal(P, P.T)

    def test_upper_entries(self):
        P = np.array([[1.0, 2.0], [2.0, 3.0]])

        np.testing.assert_array_equal(upper_entries(P), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(from_upper_entries(upper_entries(P), 2), P)

    def test_unit_ball(self):
        x = unit_ball(np.random.default_rng(1), 500, 3)

        assert x.shape == (500, 3)
        assert np.all(np.linalg.norm(x, axis=1) <= 1.0)

    def test_values(self):
        x = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]])

        np.testing.assert_allclose(quadratic_true(x, np.eye(3)), [5.0, 9.0])

    def test_generated_data_is_nonnegative(self):
        data = gen_quadratic(4, 6, np.random.default_rng(2))

        assert (data.size, data.n, data.p) == (24, 3, 6)
        assert np.all(data.y >= -1e-12)


class TestBattery:
    def test_matches_the_formula(self):
        c = BatteryConstants()
        q, b, A, Q, T = 0.5, 10.0, 25.0, 1.0, 25.0
        expected = (
            c.z
            * A ** (c.z - 1.0)
            * b
            * (c.alpha * q / Q + c.beta)
            * math.exp((-c.E_a + c.eta * b / Q) / (c.R_g * (c.T0 + T)))
        )

        value = battery_true([q, b], [A, Q, T])[0]

        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(8.223e-4, rel=1e-3)

    def test_short_term_model_is_the_slope_at_half_charge(self):
        theta = np.array([[12.0, 1.0, 30.0]])
        h = 1e-4

        slope = (battery_true([0.5, h], theta) - battery_true([0.5, -h], theta)) / (2.0 * h)

        assert battery_short([0.5, 1.0], theta)[0] == pytest.approx(slope[0], rel=1e-6)

    def test_no_charge_rate_no_aging(self):
        assert battery_true([0.3, 0.0], [10.0, 1.0, 20.0])[0] == 0.0

    def test_generated_ranges(self):
        data = gen_battery(4, 5, np.random.default_rng(3))

        assert data.size == 20
        assert np.all(data.theta[:, 0] >= 1.0)
        np.testing.assert_array_equal(data.theta[:, 1], 1.0)
        assert np.all((data.x[:, 0] >= 0.2) & (data.x[:, 0] <= 0.8))


class TestEllipse:
    def test_labels(self):
        theta = np.tile([0.0, 0.0, 1.0, 2.0], (4, 1))
        x = np.array([[0.0, 1.5], [1.5, 0.0], [1.0, 0.0], [0.0, -2.5]])

        np.testing.assert_array_equal(ellipse_labels(x, theta), [-1.0, 1.0, -1.0, 1.0])

    def test_generated_labels_are_signs(self):
        data = gen_ellipse(3, 20, np.random.default_rng(4))

        assert set(np.unique(data.y)) <= {-1.0, 1.0}


class TestPendulum:
    def test_upright_start_costs_nothing(self):
        result = solve_ocp(PendulumSystem(), np.array([np.pi, 0.0]), 1.0, horizon=10)

        assert result.cost < 1e-12

    def test_adjoint_gradient_matches_central_differences(self):
        system = PendulumSystem()
        z0 = np.array([0.3, 0.1])
        inputs = np.random.default_rng(5).uniform(-5.0, 5.0, size=15)
        eps = 1e-6

        _, grad = horizon_cost_and_grad(system, z0, 1.2, inputs)

        fd = np.empty_like(inputs)
        for t in range(len(inputs)):
            e = np.zeros_like(inputs)
            e[t] = eps
            plus, _ = horizon_cost_and_grad(system, z0, 1.2, inputs + e)
            minus, _ = horizon_cost_and_grad(system, z0, 1.2, inputs - e)
            fd[t] = (plus - minus) / (2.0 * eps)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_tail_costs_telescope(self):
        system = PendulumSystem()
        inputs = np.linspace(-1.0, 1.0, 8)
        states = system.rollout(np.array([0.2, 0.0]), inputs, 0.8)

        tails = tail_costs(system, states, inputs)

        stage = system.stage_cost(states[:-1], inputs)
        np.testing.assert_allclose(tails[:-1] - tails[1:], stage[:-1], rtol=1e-12)
        assert tails[-1] == pytest.approx(stage[-1])

    def test_optimal_inputs_beat_doing_nothing(self):
        system = PendulumSystem()
        z0 = np.zeros(2)

        result = solve_ocp(system, z0, 1.0, horizon=20)

        idle, _ = horizon_cost_and_grad(system, z0, 1.0, np.zeros(20))
        assert result.cost < idle
        assert result.states.shape == (21, 2)

    def test_rejects_empty_horizon(self):
        with pytest.raises(ValueError):
            solve_ocp(PendulumSystem(), np.zeros(2), 1.0, horizon=0)


class TestAdp:
    def test_flat_value_needs_no_input(self):
        arch = PcfArchitecture.create(n=2, p=1, d=1, widths=[3, 3], psi_widths=[4])
        model = PcfModel(arch, np.zeros(arch.weight_count))

        assert abs(adp_step(model, PendulumSystem(), np.array([1.0, 0.5]), 1.0)) < 1e-9

    def test_linear_value_has_a_closed_form_input(self):
        # slope 2 r u + a h / m vanishes at u = -a h / (2 r m) = -10 a / m
        system = PendulumSystem()

        u = adp_step(velocity_value_model(1.0), system, np.array([0.4, 0.0]), 1.0)

        assert u == pytest.approx(-10.0, abs=1e-8)
        assert adp_step(velocity_value_model(1.0), system, np.array([0.4, 0.0]), 2.0) == pytest.approx(-5.0, abs=1e-8)

    def test_bracket_size_does_not_move_the_minimizer(self):
        model = velocity_value_model(1.0)
        z = np.array([2.0, -0.3])

        wide = adp_step(model, PendulumSystem(), z, 1.0, u_max=50.0)
        narrow = adp_step(model, PendulumSystem(), z, 1.0, u_max=20.0)

        assert wide == pytest.approx(narrow, abs=1e-8)

    def test_bracket_is_doubled_once(self):
        model = velocity_value_model(1.0)

        assert adp_step(model, PendulumSystem(), np.zeros(2), 1.0, u_max=6.0) == pytest.approx(-10.0, abs=1e-8)

    def test_minimizer_outside_the_bracket(self):
        with pytest.raises(BracketError):
            adp_step(velocity_value_model(1000.0), PendulumSystem(), np.zeros(2), 1.0)

    def test_step_cost(self):
        system = PendulumSystem()
        model = velocity_value_model(3.0)
        z = np.array([1.0, 0.5])

        cost = step_cost(model, system, z, 1.0, 2.0)

        z_next = system.step(z, 2.0, 1.0)
        assert cost == pytest.approx(system.stage_cost(z, 2.0) + 3.0 * z_next[1], rel=1e-12)

    def test_closed_loop_with_flat_value_is_the_free_response(self):
        arch = PcfArchitecture.create(n=2, p=1, d=1, widths=[3, 3], psi_widths=[4])
        model = PcfModel(arch, np.zeros(arch.weight_count))
        system = PendulumSystem()

        states, inputs = closed_loop(model, system, np.array([0.5, 0.0]), 1.0, steps=5)

        np.testing.assert_allclose(inputs, 0.0, atol=1e-9)
        np.testing.assert_allclose(states, system.rollout(np.array([0.5, 0.0]), np.zeros(5), 1.0), atol=1e-9)

    def test_first_arrival(self):
        states = np.array([[0.0, 0.0], [2.0, 0.0], [3.0, 0.5], [np.pi, 0.0]])

        assert first_arrival(states) == 2
        assert first_arrival(states[:2]) is None

    def test_tail_cost_dataset_skips_failed_samples(self):
        result = OcpResult(
            inputs=np.zeros(3),
            states=np.zeros((4, 2)),
            tail_costs=np.array([3.0, 2.0, 1.0]),
            converged=True,
            message="",
        )

        data = tail_cost_dataset([None, result], np.array([0.7, 1.3]))

        assert data.size == 3
        np.testing.assert_array_equal(data.theta[:, 0], 1.3)
        np.testing.assert_array_equal(data.y[:, 0], [3.0, 2.0, 1.0])

    def test_every_sample_failing(self):
        with pytest.raises(NonFiniteError):
            tail_cost_dataset([None, None], np.array([1.0, 2.0]))


class TestHarness:
    def test_streams_are_independent_and_seeded(self, tmp_path):
        config = ExperimentConfig(ExperimentName.pwa, tmp_path, seed=3)

        first = config.rng(0).uniform(size=4)

        np.testing.assert_array_equal(first, config.rng(0).uniform(size=4))
        assert not np.array_equal(first, config.rng(1).uniform(size=4))

    def test_rmse_where(self):
        y = np.array([1.0, 2.0, 3.0])

        assert rmse_where(y + 1.0, y) == pytest.approx(1.0)
        assert rmse_where(y, y, np.array([False, False, False])) is None


@pytest.mark.parametrize(
    "name", [ExperimentName.pwa, ExperimentName.quadratic, ExperimentName.battery, ExperimentName.ellipse]
)
def test_smoke_run(tmp_path, name):
    config = ExperimentConfig(name, tmp_path / name.value, scale=Scale.smoke, n_workers=1)

    metrics = run_experiment(config)

    assert metrics["experiment"] == name.value
    assert json.loads((config.out / "metrics.json").read_text()) == metrics
    for artifact in ("model.json", "config.json", "report.json", "predictions.csv"):
        assert (config.out / artifact).exists()


@pytest.mark.slow
def test_adp_smoke_run(tmp_path):
    config = ExperimentConfig(ExperimentName.adp, tmp_path, scale=Scale.smoke, n_workers=2)

    metrics = run_experiment(config)

    assert metrics["failed_samples"] <= metrics["samples"]
    assert (tmp_path / "closed_loop.csv").exists()


@pytest.mark.slow
class TestDeskAcceptance:
    def run(self, tmp_path, name: ExperimentName) -> dict:
        return run_experiment(ExperimentConfig(name, tmp_path, scale=Scale.desk, n_workers=4))

    def test_pwa(self, tmp_path):
        metrics = self.run(tmp_path, ExperimentName.pwa)

        assert metrics["rmse_all"] <= 0.10
        assert metrics["rmse_convex"] <= 0.02
        assert metrics["rmse_nonconvex_vs_affine"] <= 0.05

    def test_quadratic(self, tmp_path):
        assert self.run(tmp_path, ExperimentName.quadratic)["rmse"] <= 0.05

    def test_battery(self, tmp_path):
        metrics = self.run(tmp_path, ExperimentName.battery)

        assert metrics["rmse_pcf"] <= metrics["rmse_short"] / 3.0

    def test_ellipse(self, tmp_path):
        assert self.run(tmp_path, ExperimentName.ellipse)["test_error_rate"] <= 0.05

    def test_adp(self, tmp_path):
        metrics = self.run(tmp_path, ExperimentName.adp)

        assert metrics["arrival_step"] is not None
        assert metrics["cost_ratio"] <= 1.5
        assert metrics["mean_equilibrium_gradient"] <= 1e-2
