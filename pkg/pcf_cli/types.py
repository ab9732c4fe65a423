import dataclasses
import re
from enum import StrEnum

import typer


class Activation(StrEnum):
    relu = "relu"
    softplus = "softplus"


class Monotonicity(StrEnum):
    none = "none"
    increasing = "increasing"
    decreasing = "decreasing"


class QuadraticKind(StrEnum):
    none = "none"
    full = "full"
    low_rank = "low_rank"


class LossKind(StrEnum):
    quadratic = "quadratic"
    l1 = "l1"
    huber = "huber"
    logistic = "logistic"


class RegKind(StrEnum):
    none = "none"
    l2 = "l2"
    l1 = "l1"
    elastic_net = "elastic_net"


class Metric(StrEnum):
    r2 = "r2"
    rmse = "rmse"
    error_rate = "error_rate"


class ExportMode(StrEnum):
    symbolic_theta = "symbolic_theta"
    bound_theta = "bound_theta"


@dataclasses.dataclass(frozen=True)
class Quadratic:
    kind: QuadraticKind = QuadraticKind.none
    rank: int | None = None

    pattern = re.compile(r"(none|full|low_rank)(?:\((\d+)\))?")

    expected_format_msg = "Expected one of: none, full, low_rank, low_rank(<rank>)\nExample: low_rank(2)"

    @classmethod
    def parse(cls, value: str) -> "Quadratic":
        if len(value) == 0:
            raise typer.BadParameter("Got empty string.")

        match = cls.pattern.fullmatch(value.strip())
        if match is None:
            raise typer.BadParameter(f"Invalid format.\n{cls.expected_format_msg}")

        kind = QuadraticKind(match.group(1))
        rank = match.group(2)
        if rank is not None:
            if kind != QuadraticKind.low_rank:
                raise typer.BadParameter(f"Only low_rank takes a rank.\n{cls.expected_format_msg}")
            rank = int(rank)
            if rank < 1:
                raise typer.BadParameter("Rank must be at least 1.")

        return cls(kind, rank)

    def resolved_rank(self, n: int) -> int:
        if self.rank is not None:
            return self.rank
        return max(1, min(n, 4))

    def __str__(self):
        if self.kind == QuadraticKind.low_rank and self.rank is not None:
            return f"low_rank({self.rank})"
        return self.kind.value


class NodeKind(StrEnum):
    variable = "variable"
    parameter_constant = "parameter_constant"
    affine = "affine"
    nonneg_matmul = "nonneg_matmul"
    relu = "relu"
    softplus = "softplus"
    sum_of_squares = "sum_of_squares"
    add = "add"


class Curvature(StrEnum):
    constant = "constant"
    affine = "affine"
    convex = "convex"


class ExperimentName(StrEnum):
    pwa = "pwa"
    quadratic = "quadratic"
    battery = "battery"
    adp = "adp"
    ellipse = "ellipse"


class Scale(StrEnum):
    smoke = "smoke"
    desk = "desk"
    full = "full"
