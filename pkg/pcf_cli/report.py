import dataclasses
import json

from rich.console import Console
from rich.table import Table


def _number(value: float | None) -> float | None:
    return None if value is None else float(value)


@dataclasses.dataclass(frozen=True)
class StartOutcome:
    """Endpoint of one multi-start run: objective after the Adam warm-up and after L-BFGS refinement."""

    index: int
    failed: bool
    adam_objective: float | None = None
    objective: float | None = None
    lbfgs_iterations: int = 0
    evaluations: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "failed": self.failed,
            "adam_objective": _number(self.adam_objective),
            "objective": _number(self.objective),
            "lbfgs_iterations": self.lbfgs_iterations,
            "evaluations": self.evaluations,
            "message": self.message,
        }


@dataclasses.dataclass(frozen=True)
class LambdaScore:
    value: float
    fold_scores: list[float | None]
    mean: float | None

    @property
    def dropped(self) -> bool:
        return self.mean is None

    def to_dict(self) -> dict:
        return {
            "lambda": self.value,
            "fold_scores": [_number(score) for score in self.fold_scores],
            "mean": _number(self.mean),
            "dropped": self.dropped,
        }


@dataclasses.dataclass(frozen=True)
class FitReport:
    chosen_lambda: float
    lambda_grid: list[float]
    starts: list[StartOutcome]
    best_start: int
    train_objective: float
    validation_metric: str | None = None
    lambda_scores: list[LambdaScore] = dataclasses.field(default_factory=list)
    train_metrics: dict[str, float] = dataclasses.field(default_factory=dict)
    test_metrics: dict[str, float] | None = None

    def with_metrics(self, train: dict[str, float], test: dict[str, float] | None) -> "FitReport":
        return dataclasses.replace(self, train_metrics=train, test_metrics=test)

    def to_dict(self) -> dict:
        return {
            "chosen_lambda": self.chosen_lambda,
            "lambda_grid": list(self.lambda_grid),
            "validation_metric": self.validation_metric,
            "lambda_scores": [score.to_dict() for score in self.lambda_scores],
            "best_start": self.best_start,
            "train_objective": self.train_objective,
            "starts": [start.to_dict() for start in self.starts],
            "train_metrics": {key: float(value) for key, value in self.train_metrics.items()},
            "test_metrics": None
            if self.test_metrics is None
            else {key: float(value) for key, value in self.test_metrics.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def print_report(report: FitReport, console: Console | None = None):
    console = console or Console(stderr=True)

    if len(report.lambda_scores) > 0:
        table = Table(title=f"Cross-validation ({report.validation_metric})", show_lines=False)
        table.add_column("lambda", justify="right")
        table.add_column("mean", justify="right")
        table.add_column("folds")
        for score in report.lambda_scores:
            chosen = "*" if score.value == report.chosen_lambda else ""
            mean = "dropped" if score.dropped else f"{score.mean:.4f}"
            folds = ", ".join("failed" if s is None else f"{s:.4f}" for s in score.fold_scores)
            table.add_row(f"{score.value:.1e}{chosen}", mean, folds)
        console.print(table)

    table = Table(title="Starts", show_lines=False)
    table.add_column("start", justify="right")
    table.add_column("after Adam", justify="right")
    table.add_column("final", justify="right")
    table.add_column("L-BFGS iterations", justify="right")
    table.add_column("status")
    for start in report.starts:
        best = " (best)" if start.index == report.best_start else ""
        adam = "-" if start.adam_objective is None else f"{start.adam_objective:.6e}"
        final = "-" if start.objective is None else f"{start.objective:.6e}"
        status = ("failed: " if start.failed else "") + start.message + best
        table.add_row(str(start.index), adam, final, str(start.lbfgs_iterations), status)
    console.print(table)

    metrics = {"train": report.train_metrics, "test": report.test_metrics or {}}
    table = Table(title="Metrics")
    table.add_column("split")
    for name in sorted({name for values in metrics.values() for name in values}):
        table.add_column(name, justify="right")
    names = sorted({name for values in metrics.values() for name in values})
    for split, values in metrics.items():
        if len(values) == 0:
            continue
        table.add_row(split, *[f"{values[name]:.6g}" if name in values else "-" for name in names])
    console.print(table)
