import dataclasses
from pathlib import Path

from pcf_cli.data import read_data
from pcf_cli.model import evaluate
from pcf_cli.model_file import load_model
from pcf_cli.model_selection import r2_score
from pcf_cli.model_selection import rmse
from pcf_cli.training import error_rate
from pcf_cli.types import Metric


@dataclasses.dataclass
class ScoreConfig:
    model: Path
    data: Path
    metric: Metric = Metric.r2


def execute_score(config: ScoreConfig) -> float:
    model = load_model(config.model)
    data = read_data(config.data)
    match config.metric:
        case Metric.error_rate:
            return error_rate(model, data)
        case Metric.rmse:
            return rmse(evaluate(model, data.x, data.theta), data.y)
    return r2_score(evaluate(model, data.x, data.theta), data.y)
