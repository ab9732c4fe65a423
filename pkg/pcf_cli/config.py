import dataclasses
import json
from pathlib import Path

import numpy as np
import typer

from pcf_cli.error import ConfigError
from pcf_cli.error import InvalidInputError
from pcf_cli.model import PcfArchitecture
from pcf_cli.types import Activation
from pcf_cli.types import LossKind
from pcf_cli.types import Monotonicity
from pcf_cli.types import Quadratic
from pcf_cli.types import RegKind

DEFAULT_LAMBDA_GRID = [float(value) for value in np.logspace(-8, -1, 8)]


def normalize_section(section: str, config, fields: dict[str, str]) -> dict:
    """Replace dashes with underscores, map JSON keys onto field names and reject unknown keys."""
    if not isinstance(config, dict):
        raise ConfigError(f"Invalid type for {section} option in config. Expected dictionary but got {type(config)}.")

    output = {}
    for key, value in config.items():
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"Unknown option in {section} config: {key}", name=key)
        output[fields[key]] = value
    return output


def check_type(section: str, key: str, value, expected: str):
    checks = {
        "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "number": lambda v: isinstance(v, int | float) and not isinstance(v, bool),
        "boolean": lambda v: isinstance(v, bool),
        "string": lambda v: isinstance(v, str),
        "list": lambda v: isinstance(v, list),
    }
    if not checks[expected](value):
        raise ConfigError(
            f"Invalid type for {key} option in {section} config. Expected {expected} but got {type(value)}.", name=key
        )


def check_nonnegative(section: str, key: str, value):
    if value < 0:
        raise ConfigError(
            f"Invalid value for {key} option in {section} config. Expected >= 0 but got {value}.", name=key
        )


def parse_choice(section: str, key: str, value, enum_type):
    check_type(section, key, value, "string")
    try:
        return enum_type(value)
    except ValueError:
        choices = ", ".join(member.value for member in enum_type)
        raise ConfigError(
            f"Invalid value for {key} option in {section} config. Expected one of: {choices} but got '{value}'.",
            name=key,
        ) from None


def check_int_list(section: str, key: str, value):
    check_type(section, key, value, "list")
    for i, item in enumerate(value):
        if not isinstance(item, int) or isinstance(item, bool):
            raise ConfigError(
                f"Invalid type for {key} entry at index {i} in {section} config. "
                + f"Expected integer but got {type(item)}.",
                name=key,
            )


@dataclasses.dataclass
class ArchitectureConfig:
    layers: int | None
    widths: list[int] | None
    activation: Activation
    psi_layers: int | None
    psi_widths: list[int] | None
    psi_activation: Activation | None
    weight_activation: Activation
    monotonicity: Monotonicity | list[Monotonicity]
    quadratic: Quadratic
    scaling: bool

    @classmethod
    def defaults(cls) -> dict:
        return {
            "layers": None,
            "widths": None,
            "activation": Activation.relu,
            "psi_layers": None,
            "psi_widths": None,
            "psi_activation": None,
            "weight_activation": Activation.relu,
            "monotonicity": Monotonicity.none,
            "quadratic": Quadratic(),
            "scaling": False,
        }

    @classmethod
    def load(cls, config: dict | None) -> "ArchitectureConfig":
        if config is None:
            return cls(**cls.defaults())
        return cls(**{**cls.defaults(), **cls.validate(config)})

    @classmethod
    def validate(cls, config: dict) -> dict:
        output = normalize_section("architecture", config, {key: key for key in cls.defaults()})

        for key in ("layers", "psi_layers"):
            if output.get(key) is not None:
                check_type("architecture", key, output[key], "integer")
        for key in ("widths", "psi_widths"):
            if output.get(key) is not None:
                check_int_list("architecture", key, output[key])
        for key in ("activation", "weight_activation"):
            if key in output:
                output[key] = parse_choice("architecture", key, output[key], Activation)
        if output.get("psi_activation") is not None:
            psi_activation = output["psi_activation"]
            output["psi_activation"] = parse_choice("architecture", "psi_activation", psi_activation, Activation)

        monotonicity = output.get("monotonicity")
        if isinstance(monotonicity, list):
            output["monotonicity"] = [
                parse_choice("architecture", "monotonicity", m, Monotonicity) for m in monotonicity
            ]
        elif monotonicity is not None:
            output["monotonicity"] = parse_choice("architecture", "monotonicity", monotonicity, Monotonicity)

        if "quadratic" in output:
            check_type("architecture", "quadratic", output["quadratic"], "string")
            try:
                output["quadratic"] = Quadratic.parse(output["quadratic"])
            except typer.BadParameter as e:
                raise ConfigError(
                    f"Invalid value for quadratic option in architecture config. {e.message}", name="quadratic"
                ) from None

        if "scaling" in output:
            check_type("architecture", "scaling", output["scaling"], "boolean")

        return output

    def build(self, n: int, p: int, d: int) -> PcfArchitecture:
        return PcfArchitecture.create(
            n=n,
            p=p,
            d=d,
            layers=self.layers,
            widths=self.widths,
            activation=self.activation,
            psi_layers=self.psi_layers,
            psi_widths=self.psi_widths,
            monotonicity=self.monotonicity,
            quadratic=self.quadratic,
            scaling=self.scaling,
            psi_activation=self.psi_activation,
            weight_activation=self.weight_activation,
        )

    def to_dict(self) -> dict:
        monotonicity = self.monotonicity
        return {
            "layers": self.layers,
            "widths": self.widths,
            "activation": self.activation.value,
            "psi_layers": self.psi_layers,
            "psi_widths": self.psi_widths,
            "psi_activation": self.psi_activation.value if self.psi_activation is not None else None,
            "weight_activation": self.weight_activation.value,
            "monotonicity": [m.value for m in monotonicity] if isinstance(monotonicity, list) else monotonicity.value,
            "quadratic": str(self.quadratic),
            "scaling": self.scaling,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureConfig":
        return cls.load({key: value for key, value in data.items() if value is not None})


@dataclasses.dataclass
class LossConfig:
    kind: LossKind
    huber_delta: float

    @classmethod
    def defaults(cls) -> dict:
        return {"kind": LossKind.quadratic, "huber_delta": 1.0}

    @classmethod
    def load(cls, config: dict | None) -> "LossConfig":
        if config is None:
            return cls(**cls.defaults())
        return cls(**{**cls.defaults(), **cls.validate(config)})

    @classmethod
    def validate(cls, config: dict) -> dict:
        output = normalize_section("loss", config, {key: key for key in cls.defaults()})
        if "kind" in output:
            output["kind"] = parse_choice("loss", "kind", output["kind"], LossKind)
        if "huber_delta" in output:
            check_type("loss", "huber_delta", output["huber_delta"], "number")
            delta = output["huber_delta"]
            if delta <= 0:
                raise ConfigError(
                    f"Invalid value for huber_delta option in loss config. Expected > 0 but got {delta}.",
                    name="huber_delta",
                )
            output["huber_delta"] = float(output["huber_delta"])
        return output

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "huber_delta": self.huber_delta}

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        return cls.load(data)


@dataclasses.dataclass
class RegularizationConfig:
    """lambda * r(w) with r chosen by kind, plus the optional argmin term rho_min * |grad_x f(g) - q|^2.

    argmin_point and argmin_tilt are constant over theta here; fit() also accepts a callable target.
    """

    lambda_: float
    kind: RegKind
    alpha_l2: float
    alpha_l1: float
    rho_min: float
    argmin_point: list[float] | None
    argmin_tilt: list[float] | None

    json_keys = {
        "lambda": "lambda_",
        "kind": "kind",
        "alpha_l2": "alpha_l2",
        "alpha_l1": "alpha_l1",
        "rho_min": "rho_min",
        "argmin_point": "argmin_point",
        "argmin_tilt": "argmin_tilt",
    }

    @classmethod
    def defaults(cls) -> dict:
        return {
            "lambda_": 0.0,
            "kind": RegKind.l2,
            "alpha_l2": 1.0,
            "alpha_l1": 1.0,
            "rho_min": 0.0,
            "argmin_point": None,
            "argmin_tilt": None,
        }

    @classmethod
    def load(cls, config: dict | None) -> "RegularizationConfig":
        if config is None:
            return cls(**cls.defaults())
        return cls(**{**cls.defaults(), **cls.validate(config)})

    @classmethod
    def validate(cls, config: dict) -> dict:
        output = normalize_section("regularization", config, cls.json_keys)
        if "kind" in output:
            output["kind"] = parse_choice("regularization", "kind", output["kind"], RegKind)
        for key in ("lambda", "alpha_l2", "alpha_l1", "rho_min"):
            field = cls.json_keys[key]
            if field in output:
                check_type("regularization", key, output[field], "number")
                check_nonnegative("regularization", key, output[field])
                output[field] = float(output[field])
        for key in ("argmin_point", "argmin_tilt"):
            if output.get(key) is not None:
                check_type("regularization", key, output[key], "list")
                for i, item in enumerate(output[key]):
                    if not isinstance(item, int | float) or isinstance(item, bool):
                        raise ConfigError(
                            f"Invalid type for {key} entry at index {i} in regularization config. "
                            + f"Expected number but got {type(item)}.",
                            name=key,
                        )
                output[key] = [float(item) for item in output[key]]
        return output

    def with_lambda(self, value: float) -> "RegularizationConfig":
        return dataclasses.replace(self, lambda_=float(value))

    def to_dict(self) -> dict:
        return {
            "lambda": self.lambda_,
            "kind": self.kind.value,
            "alpha_l2": self.alpha_l2,
            "alpha_l1": self.alpha_l1,
            "rho_min": self.rho_min,
            "argmin_point": self.argmin_point,
            "argmin_tilt": self.argmin_tilt,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RegularizationConfig":
        return cls.load(data)


@dataclasses.dataclass
class TrainConfig:
    """Optimizer settings for fit.

    lbfgs_max_evals caps objective evaluations in the L-BFGS stage (default lbfgs_iters * 5 // 4). A start
    that hits the cap can stop before lbfgs_iters iterations; its report entry says "evaluation limit reached".
    """

    adam_iters: int
    adam_lr: float
    lbfgs_iters: int
    lbfgs_memory: int
    lbfgs_max_evals: int | None
    n_starts: int | None
    n_workers: int
    seed: int
    batch_size: int | None
    block_size: int

    @classmethod
    def defaults(cls) -> dict:
        return {
            "adam_iters": 200,
            "adam_lr": 1e-3,
            "lbfgs_iters": 2000,
            "lbfgs_memory": 10,
            "lbfgs_max_evals": None,
            "n_starts": None,
            "n_workers": 4,
            "seed": 0,
            "batch_size": None,
            "block_size": 1024,
        }

    @classmethod
    def load(cls, config: dict | None) -> "TrainConfig":
        if config is None:
            return cls(**cls.defaults())
        return cls(**{**cls.defaults(), **cls.validate(config)})

    @classmethod
    def validate(cls, config: dict) -> dict:
        output = normalize_section("training", config, {key: key for key in cls.defaults()})
        for key in ("adam_iters", "lbfgs_iters", "seed"):
            if key in output:
                check_type("training", key, output[key], "integer")
                check_nonnegative("training", key, output[key])
        for key in ("lbfgs_memory", "n_workers", "block_size", "lbfgs_max_evals", "n_starts", "batch_size"):
            if output.get(key) is not None:
                check_type("training", key, output[key], "integer")
                if output[key] < 1:
                    raise ConfigError(
                        f"Invalid value for {key} option in training config. Expected >= 1 but got {output[key]}.",
                        name=key,
                    )
        if "adam_lr" in output:
            check_type("training", "adam_lr", output["adam_lr"], "number")
            check_nonnegative("training", "adam_lr", output["adam_lr"])
            output["adam_lr"] = float(output["adam_lr"])
        return output

    @property
    def starts(self) -> int:
        return self.n_starts if self.n_starts is not None else max(10, self.n_workers)

    @property
    def full_batch(self) -> bool:
        return self.batch_size is None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls.load(data)


@dataclasses.dataclass
class CvConfig:
    enabled: bool
    folds: int
    lambda_grid: list[float]
    seed: int | None

    @classmethod
    def defaults(cls) -> dict:
        return {"enabled": False, "folds": 5, "lambda_grid": list(DEFAULT_LAMBDA_GRID), "seed": None}

    @classmethod
    def load(cls, config: dict | None) -> "CvConfig":
        if config is None:
            return cls(**cls.defaults())
        return cls(**{**cls.defaults(), **cls.validate(config)})

    @classmethod
    def validate(cls, config: dict) -> dict:
        output = normalize_section("cross_validation", config, {key: key for key in cls.defaults()})
        if "enabled" in output:
            check_type("cross_validation", "enabled", output["enabled"], "boolean")
        if "folds" in output:
            check_type("cross_validation", "folds", output["folds"], "integer")
            folds = output["folds"]
            if folds < 2:
                raise ConfigError(
                    f"Invalid value for folds option in cross_validation config. Expected >= 2 but got {folds}.",
                    name="folds",
                )
        if "lambda_grid" in output:
            grid = output["lambda_grid"]
            check_type("cross_validation", "lambda_grid", grid, "list")
            if len(grid) == 0:
                raise ConfigError(
                    "Option lambda_grid in cross_validation config must not be empty.", name="lambda_grid"
                )
            for i, value in enumerate(grid):
                if not isinstance(value, int | float) or isinstance(value, bool) or value < 0:
                    raise ConfigError(
                        f"Invalid lambda_grid entry at index {i} in cross_validation config. "
                        + f"Expected nonnegative number but got {value!r}.",
                        name="lambda_grid",
                    )
            output["lambda_grid"] = [float(value) for value in grid]
        if output.get("seed") is not None:
            check_type("cross_validation", "seed", output["seed"], "integer")
        return output

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CvConfig":
        return cls.load(data)


@dataclasses.dataclass
class SplitConfig:
    test_fraction: float
    seed: int | None

    @classmethod
    def defaults(cls) -> dict:
        return {"test_fraction": 0.2, "seed": None}

    @classmethod
    def load(cls, config: dict | None) -> "SplitConfig":
        if config is None:
            return cls(**cls.defaults())
        return cls(**{**cls.defaults(), **cls.validate(config)})

    @classmethod
    def validate(cls, config: dict) -> dict:
        output = normalize_section("split", config, {key: key for key in cls.defaults()})
        if "test_fraction" in output:
            fraction = output["test_fraction"]
            check_type("split", "test_fraction", fraction, "number")
            if not 0.0 <= fraction < 1.0:
                raise ConfigError(
                    f"Invalid value for test_fraction option in split config. Expected [0, 1) but got {fraction}.",
                    name="test_fraction",
                )
            output["test_fraction"] = float(fraction)
        if output.get("seed") is not None:
            check_type("split", "seed", output["seed"], "integer")
        return output

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SplitConfig":
        return cls.load(data)


@dataclasses.dataclass
class RunConfig:
    architecture: ArchitectureConfig
    loss: LossConfig
    regularization: RegularizationConfig
    training: TrainConfig
    cross_validation: CvConfig
    split: SplitConfig

    sections = {
        "architecture": ArchitectureConfig,
        "loss": LossConfig,
        "regularization": RegularizationConfig,
        "training": TrainConfig,
        "cross_validation": CvConfig,
        "split": SplitConfig,
    }

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_dict({})

    @classmethod
    def load(cls, path: Path | None) -> "RunConfig":
        if path is None:
            return cls.defaults()

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: '{path}'.")

        try:
            config = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error while parsing config file at '{path}':\n{e}") from None

        return cls.from_dict(config)

    @classmethod
    def from_dict(cls, config: dict) -> "RunConfig":
        if not isinstance(config, dict):
            raise ConfigError(f"Invalid type for config. Expected dictionary but got {type(config)}.")

        config = {key.replace("-", "_"): value for key, value in config.items()}
        for key in config:
            if key not in cls.sections:
                raise ConfigError(f"Unknown section in config: {key}", name=key)

        return cls(**{key: section.load(config.get(key)) for key, section in cls.sections.items()})

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        if seed < 0:
            raise InvalidInputError(f"Seed must be nonnegative, got {seed}.", name="seed")
        return dataclasses.replace(
            self,
            training=dataclasses.replace(self.training, seed=seed),
            split=dataclasses.replace(self.split, seed=seed),
        )

    @property
    def split_seed(self) -> int:
        return self.split.seed if self.split.seed is not None else self.training.seed

    @property
    def cv_seed(self) -> int:
        return self.cross_validation.seed if self.cross_validation.seed is not None else self.training.seed

    def to_dict(self) -> dict:
        return {key: getattr(self, key).to_dict() for key in self.sections}
