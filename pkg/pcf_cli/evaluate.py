import dataclasses
from pathlib import Path

from pcf_cli.data import format_table
from pcf_cli.data import read_data
from pcf_cli.model import evaluate
from pcf_cli.model_file import load_model


@dataclasses.dataclass
class EvalConfig:
    model: Path
    data: Path
    out: Path | None = None


def execute_eval(config: EvalConfig) -> str:
    """Predictions as CSV with columns y0..y{d-1}; output columns in the data file are ignored."""
    model = load_model(config.model)
    data = read_data(config.data, require_y=False)
    y = evaluate(model, data.x, data.theta)
    text = format_table([f"y{i}" for i in range(model.arch.d)], y)
    if config.out is not None:
        out = Path(config.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    return text
