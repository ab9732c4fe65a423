import numpy as np
import pytest

from pcf_cli.config import LossConfig
from pcf_cli.config import RegularizationConfig
from pcf_cli.config import TrainConfig
from pcf_cli.data import Dataset
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.model import init_weights
from pcf_cli.types import Activation
from pcf_cli.types import Quadratic


def random_model(arch: PcfArchitecture, seed: int = 0, spread: float = 0.5) -> PcfModel:
    """Initialized weights plus noise, so that every head is exercised away from its init value."""
    rng = np.random.default_rng(seed)
    w = init_weights(arch, rng) + spread * rng.standard_normal(arch.weight_count)
    return PcfModel(arch, w)


def small_arch(
    activation: Activation = Activation.softplus,
    quadratic: str = "none",
    n: int = 2,
    p: int = 2,
    d: int = 1,
    **kwargs,
) -> PcfArchitecture:
    return PcfArchitecture.create(
        n=n,
        p=p,
        d=d,
        widths=kwargs.pop("widths", [3, 3]),
        activation=activation,
        psi_widths=kwargs.pop("psi_widths", [4]),
        quadratic=Quadratic.parse(quadratic),
        **kwargs,
    )


def shifted_parabola(count_x: int = 10, thetas=(-0.5, 0.0, 0.5)) -> Dataset:
    """y = (x - theta)^2 on a grid of x in [-1, 1] for each theta."""
    x = np.tile(np.linspace(-1.0, 1.0, count_x), len(thetas))
    theta = np.repeat(np.asarray(thetas, dtype=float), count_x)
    return Dataset.create(x, theta, (x - theta) ** 2)


@pytest.fixture
def parabola() -> Dataset:
    return shifted_parabola()


@pytest.fixture
def quick_training() -> TrainConfig:
    return TrainConfig.from_dict({"adam_iters": 20, "lbfgs_iters": 60, "n_starts": 2, "n_workers": 2, "seed": 3})


@pytest.fixture
def quadratic_loss() -> LossConfig:
    return LossConfig.load(None)


@pytest.fixture
def no_regularization() -> RegularizationConfig:
    return RegularizationConfig.load(None)
