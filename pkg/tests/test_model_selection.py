import numpy as np
import pytest
from conftest import shifted_parabola

import pcf_cli.model_selection
from pcf_cli.config import CvConfig
from pcf_cli.config import LossConfig
from pcf_cli.config import RegularizationConfig
from pcf_cli.config import TrainConfig
from pcf_cli.error import FitFailedError
from pcf_cli.error import InvalidInputError
from pcf_cli.error import SelectionFailedError
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.model_selection import cross_validate
from pcf_cli.model_selection import kfold_indices
from pcf_cli.model_selection import r2_score
from pcf_cli.model_selection import rmse
from pcf_cli.model_selection import score_model
from pcf_cli.types import Activation
from pcf_cli.types import Quadratic


@pytest.fixture
def arch() -> PcfArchitecture:
    return PcfArchitecture.create(
        n=1, p=1, d=1, widths=[4], activation=Activation.softplus, psi_widths=[4], quadratic=Quadratic.parse("full")
    )


@pytest.fixture
def training() -> TrainConfig:
    return TrainConfig.from_dict({"adam_iters": 20, "lbfgs_iters": 100, "n_starts": 1, "n_workers": 2, "seed": 1})


class TestScores:
    def test_perfect_prediction(self):
        y = np.array([1.0, 2.0, 4.0])

        assert r2_score(y, y) == 1.0

    def test_mean_prediction_scores_zero(self):
        y = np.array([1.0, 2.0, 6.0])

        assert r2_score(np.full(3, 3.0), y) == pytest.approx(0.0)

    def test_constant_target(self):
        y = np.full(4, 2.0)

        assert r2_score(y, y) == 1.0
        assert r2_score(y + 0.1, y) == 0.0

    def test_outputs_are_averaged(self):
        y_true = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 5.0]])
        y_pred = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]])

        assert r2_score(y_pred, y_true) == pytest.approx(0.5 * (1.0 + 0.0))

    def test_r2_needs_two_samples(self):
        with pytest.raises(InvalidInputError):
            r2_score(np.ones(1), np.ones(1))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            rmse(np.ones(3), np.ones(4))

    def test_rmse(self):
        assert rmse(np.array([1.0, -1.0]), np.zeros(2)) == pytest.approx(1.0)

    def test_classification_metrics(self, arch):
        model = PcfModel(arch, np.zeros(arch.weight_count))
        data = shifted_parabola().with_y(np.where(np.arange(30) % 2 == 0, 1.0, -1.0))

        scores = score_model(model, data, LossConfig.from_dict({"kind": "logistic"}))

        assert scores == {"loss": pytest.approx(np.log(2.0)), "error_rate": 0.0}


class TestFolds:
    def test_partition(self):
        folds = kfold_indices(23, 5, seed=0)

        assert sorted(np.concatenate(folds).tolist()) == list(range(23))
        sizes = [len(fold) for fold in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_seeded(self):
        first = kfold_indices(20, 4, seed=3)
        second = kfold_indices(20, 4, seed=3)

        for a, b in zip(first, second, strict=True):
            np.testing.assert_array_equal(a, b)

    def test_needs_two_folds(self):
        with pytest.raises(InvalidInputError):
            kfold_indices(10, 1, seed=0)

    def test_needs_a_sample_per_fold(self):
        with pytest.raises(InvalidInputError):
            kfold_indices(3, 5, seed=0)


class TestCrossValidate:
    def test_heavy_regularization_loses(self, arch, training):
        data = shifted_parabola()
        reg = RegularizationConfig.load(None)
        cv = CvConfig.from_dict({"enabled": True, "folds": 3, "lambda_grid": [0.0, 1000.0], "seed": 0})

        model, report = cross_validate(arch, data, LossConfig.load(None), reg, cv, training)

        assert report.chosen_lambda == 0.0
        assert report.lambda_grid == [0.0, 1000.0]
        assert report.validation_metric == "r2"
        assert [len(score.fold_scores) for score in report.lambda_scores] == [3, 3]
        assert report.lambda_scores[0].mean > report.lambda_scores[1].mean
        assert model.arch == arch

    def test_ties_pick_the_smallest_lambda(self, monkeypatch, arch, training):
        monkeypatch.setattr(pcf_cli.model_selection, "fold_score", lambda *args: 0.5)
        cv = CvConfig.from_dict({"folds": 2, "lambda_grid": [1e-2, 1e-4, 1e-3], "seed": 0})

        _, report = cross_validate(
            arch, shifted_parabola(), LossConfig.load(None), RegularizationConfig.load(None), cv, training
        )

        assert report.chosen_lambda == 1e-4

    def test_failed_fold_drops_its_lambda(self, monkeypatch, arch, training):
        real = pcf_cli.model_selection.fit

        def fit_fails_for_large_lambda(arch, data, loss, reg, cfg, argmin_target=None):
            if reg.lambda_ > 1.0:
                raise FitFailedError("all starts failed")
            return real(arch, data, loss, reg, cfg, argmin_target)

        monkeypatch.setattr(pcf_cli.model_selection, "fit", fit_fails_for_large_lambda)
        cv = CvConfig.from_dict({"folds": 2, "lambda_grid": [10.0, 0.1], "seed": 0})

        _, report = cross_validate(
            arch, shifted_parabola(), LossConfig.load(None), RegularizationConfig.load(None), cv, training
        )

        assert report.chosen_lambda == 0.1
        assert report.lambda_scores[0].dropped
        assert report.lambda_scores[0].fold_scores == [None, None]

    def test_every_lambda_failing_is_an_error(self, monkeypatch, arch, training):
        def always_fails(*args, **kwargs):
            raise FitFailedError("all starts failed")

        monkeypatch.setattr(pcf_cli.model_selection, "fit", always_fails)
        cv = CvConfig.from_dict({"folds": 2, "lambda_grid": [0.1], "seed": 0})

        with pytest.raises(SelectionFailedError):
            cross_validate(
                arch, shifted_parabola(), LossConfig.load(None), RegularizationConfig.load(None), cv, training
            )

    def test_classification_uses_accuracy(self, arch, training):
        data = shifted_parabola().with_y(np.where(np.arange(30) % 3 == 0, -1.0, 1.0))
        cv = CvConfig.from_dict({"folds": 2, "lambda_grid": [0.0], "seed": 0})

        _, report = cross_validate(
            arch, data, LossConfig.from_dict({"kind": "logistic"}), RegularizationConfig.load(None), cv, training
        )

        assert report.validation_metric == "accuracy"
        assert all(0.0 <= score <= 1.0 for score in report.lambda_scores[0].fold_scores)

    def test_choice_survives_rescaling_the_targets(self, arch, training):
        data = shifted_parabola()
        c = 10.0
        reg = RegularizationConfig.from_dict({"kind": "l2"})
        grid = [1e-6, 1.0]

        _, base = cross_validate(
            arch, data, LossConfig.load(None), reg, CvConfig.from_dict({"folds": 3, "lambda_grid": grid}), training
        )
        scaled_cv = CvConfig.from_dict({"folds": 3, "lambda_grid": [value * c**2 for value in grid]})
        _, scaled = cross_validate(arch, data.with_y(c * data.y), LossConfig.load(None), reg, scaled_cv, training)

        assert base.chosen_lambda == grid[0]
        assert scaled.chosen_lambda / c**2 == pytest.approx(base.chosen_lambda)
