import csv
import dataclasses
import io
import re
from pathlib import Path

import numpy as np

from pcf_cli.constants import FLOAT_FORMAT
from pcf_cli.error import InvalidInputError
from pcf_cli.error import NonFiniteError

COLUMN_PATTERN = re.compile(r"(x|th|y)(\d+)")

COLUMN_GROUPS = ("x", "th", "y")


def format_float(value: float) -> str:
    return format(float(value), FLOAT_FORMAT)


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """N samples (x, theta, y) stored as row-major arrays of shape (N, n), (N, p) and (N, d)."""

    x: np.ndarray
    theta: np.ndarray
    y: np.ndarray

    @classmethod
    def create(cls, x, theta, y) -> "Dataset":
        arrays = {}
        for name, values in (("x", x), ("theta", theta), ("y", y)):
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                values = values[:, None]
            if values.ndim != 2:
                raise InvalidInputError(f"{name} must be a 2-D array, got shape {values.shape}.", name=name)
            if not np.all(np.isfinite(values)):
                raise NonFiniteError(f"Input {name} contains non-finite values.")
            arrays[name] = values
        sizes = {name: values.shape[0] for name, values in arrays.items()}
        if len(set(sizes.values())) != 1:
            raise InvalidInputError(f"Sample counts differ between arrays: {sizes}.", name="samples")
        return cls(**arrays)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.theta.shape[1]

    @property
    def d(self) -> int:
        return self.y.shape[1]

    def take(self, indices: np.ndarray | slice) -> "Dataset":
        return Dataset(self.x[indices], self.theta[indices], self.y[indices])

    def with_y(self, y: np.ndarray) -> "Dataset":
        return Dataset.create(self.x, self.theta, y)


def split_dataset(data: Dataset, test_fraction: float, seed: int | None) -> tuple[Dataset, Dataset | None]:
    """Seeded shuffle, then hold out round(test_fraction * N) samples (at least one of each side)."""
    if test_fraction <= 0.0 or data.size < 2:
        return data, None
    n_test = min(data.size - 1, max(1, round(test_fraction * data.size)))
    order = np.random.default_rng(seed).permutation(data.size)
    return data.take(np.sort(order[n_test:])), data.take(np.sort(order[:n_test]))


def parse_header(header: list[str], require_y: bool = True) -> dict[str, list[int]]:
    """Map each column group to the column positions of its entries 0..k-1."""
    positions: dict[str, dict[int, int]] = {group: {} for group in COLUMN_GROUPS}
    for position, name in enumerate(header):
        match = COLUMN_PATTERN.fullmatch(name.strip())
        if match is None:
            raise InvalidInputError(
                f"Invalid column name '{name}' in data header. Expected x<i>, th<i> or y<i>.", name=name
            )
        group, index = match.group(1), int(match.group(2))
        if index in positions[group]:
            raise InvalidInputError(f"Duplicate column '{name}' in data header.", name=name)
        positions[group][index] = position

    columns = {}
    for group, found in positions.items():
        for index in range(len(found)):
            if index not in found:
                raise InvalidInputError(f"Missing column '{group}{index}' in data header.", name=f"{group}{index}")
        columns[group] = [found[index] for index in range(len(found))]

    if require_y and len(columns["y"]) == 0:
        raise InvalidInputError("Data header has no output columns (y0, y1, ...).", name="y0")
    return columns


def read_data(path: Path, require_y: bool = True) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Data file not found: '{path}'.")
    with path.open(newline="") as file:
        return parse_data(file, require_y=require_y, source=str(path))


def parse_data(file: io.TextIOBase, require_y: bool = True, source: str = "<data>") -> Dataset:
    reader = csv.reader(file)
    header = next(reader, None)
    if header is None:
        raise InvalidInputError(f"Data file '{source}' is empty.", name="header")
    columns = parse_header(header, require_y=require_y)

    rows = []
    for line, row in enumerate(reader, start=2):
        if len(row) == 0:
            continue
        if len(row) != len(header):
            raise InvalidInputError(
                f"Row on line {line} of '{source}' has {len(row)} cells, expected {len(header)}.", name="row"
            )
        values = []
        for name, cell in zip(header, row, strict=True):
            try:
                value = float(cell)
            except ValueError:
                raise InvalidInputError(
                    f"Could not parse '{cell}' in column '{name}' on line {line} of '{source}'.", name=name
                ) from None
            if not np.isfinite(value):
                raise InvalidInputError(f"Non-finite value in column '{name}' on line {line} of '{source}'.", name=name)
            values.append(value)
        rows.append(values)

    if len(rows) == 0:
        raise InvalidInputError(f"Data file '{source}' has no samples.", name="rows")
    table = np.asarray(rows, dtype=float)
    return Dataset.create(table[:, columns["x"]], table[:, columns["th"]], table[:, columns["y"]])


def header_for(n: int, p: int, d: int) -> list[str]:
    return [f"x{i}" for i in range(n)] + [f"th{i}" for i in range(p)] + [f"y{i}" for i in range(d)]


def write_data(data: Dataset, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.concatenate([data.x, data.theta, data.y], axis=1)
    path.write_text(format_table(header_for(data.n, data.p, data.d), table))


def format_table(header: list[str], table: np.ndarray) -> str:
    lines = [",".join(header)]
    for row in table:
        lines.append(",".join(format_float(value) for value in row))
    return "\n".join(lines) + "\n"
