"""Versioned JSON persistence of fitted models.

Every float is written in decimal with 17 significant digits, so load(save(m)) reproduces the weights
bit for bit and save(load(save(m))) is byte-identical to save(m).
"""

import json
from pathlib import Path

import numpy as np
import typer

from pcf_cli.constants import MODEL_FORMAT_VERSION
from pcf_cli.data import format_float
from pcf_cli.error import InvalidInputError
from pcf_cli.error import ModelFileError
from pcf_cli.error import NonFiniteError
from pcf_cli.error import UnsupportedCombinationError
from pcf_cli.model import PcfArchitecture
from pcf_cli.model import PcfModel
from pcf_cli.model import Scaling

INDENT = "  "

ARCHITECTURE_KEYS = {
    "n": int,
    "p": int,
    "d": int,
    "widths": list,
    "activation": str,
    "psi_widths": list,
    "psi_activation": str,
    "weight_activation": str,
    "monotonicity": list,
    "quadratic": str,
    "scaling": bool,
}

SCALING_SIZES = {
    "x_shift": "n",
    "x_scale": "n",
    "theta_shift": "p",
    "theta_scale": "p",
    "y_shift": "d",
    "y_scale": "d",
}


def encode(value, level: int = 0) -> str:
    pad = INDENT * level
    inner = INDENT * (level + 1)
    if isinstance(value, dict):
        if len(value) == 0:
            return "{}"
        items = [f"{inner}{json.dumps(key)}: {encode(item, level + 1)}" for key, item in value.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, list | tuple):
        if len(value) == 0:
            return "[]"
        if any(isinstance(item, float) for item in value):
            return "[\n" + ",\n".join(f"{inner}{encode(item, level + 1)}" for item in value) + f"\n{pad}]"
        return "[" + ", ".join(encode(item, level + 1) for item in value) + "]"
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_float(value)
    raise TypeError(f"Cannot encode value of type {type(value)}.")


def model_to_document(model: PcfModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "architecture": model.arch.to_dict(),
        "weights": [float(value) for value in model.weights],
        "scaling": None if model.scaling is None else model.scaling.to_dict(),
    }


def dumps_model(model: PcfModel) -> str:
    return encode(model_to_document(model)) + "\n"


def save_model(model: PcfModel, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_model(model))


def load_model(path: Path) -> PcfModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: '{path}'.")
    return loads_model(path.read_text())


def loads_model(text: str) -> PcfModel:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFileError(f"Invalid JSON: {e}") from None

    if not isinstance(document, dict):
        raise ModelFileError(f"Expected an object but got {type(document).__name__}.")
    expected = ("format_version", "architecture", "weights", "scaling")
    for key in document:
        if key not in expected:
            raise ModelFileError(f"Unknown key '{key}'.", f"/{key}")
    for key in expected:
        if key not in document:
            raise ModelFileError(f"Missing key '{key}'.")

    version = document["format_version"]
    if isinstance(version, bool) or version != MODEL_FORMAT_VERSION:
        raise ModelFileError(
            f"Unsupported format version {version!r}, this version reads {MODEL_FORMAT_VERSION}.", "/format_version"
        )

    arch = load_architecture(document["architecture"])
    weights = load_numbers(document["weights"], "/weights", arch.weight_count)
    scaling = load_scaling(document["scaling"], arch)
    if arch.scaling != (scaling is not None):
        raise ModelFileError("Scaling parameters must be present exactly when architecture scaling is on.", "/scaling")
    try:
        return PcfModel(arch, weights, scaling)
    except NonFiniteError as e:
        raise ModelFileError(str(e), "/weights") from None


def load_architecture(data) -> PcfArchitecture:
    if not isinstance(data, dict):
        raise ModelFileError(f"Expected an object but got {type(data).__name__}.", "/architecture")
    for key in data:
        if key not in ARCHITECTURE_KEYS:
            raise ModelFileError(f"Unknown key '{key}'.", f"/architecture/{key}")
    for key, kind in ARCHITECTURE_KEYS.items():
        if key not in data:
            raise ModelFileError(f"Missing key '{key}'.", "/architecture")
        value = data[key]
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ModelFileError(f"Expected {kind.__name__} but got {type(value).__name__}.", f"/architecture/{key}")

    try:
        return PcfArchitecture.from_dict(data)
    except InvalidInputError as e:
        raise ModelFileError(str(e), f"/architecture/{e.name or ''}".rstrip("/")) from None
    except UnsupportedCombinationError as e:
        raise ModelFileError(str(e), "/architecture/quadratic") from None
    except typer.BadParameter as e:
        raise ModelFileError(f"Invalid quadratic term: {e.message}", "/architecture/quadratic") from None
    except (ValueError, TypeError) as e:
        raise ModelFileError(f"Invalid architecture: {e}", "/architecture") from None


def load_numbers(data, pointer: str, size: int) -> np.ndarray:
    if not isinstance(data, list):
        raise ModelFileError(f"Expected a list but got {type(data).__name__}.", pointer)
    if len(data) != size:
        raise ModelFileError(f"Expected {size} entries but got {len(data)}.", pointer)
    for i, value in enumerate(data):
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ModelFileError(f"Expected a number but got {type(value).__name__}.", f"{pointer}/{i}")
        if not np.isfinite(value):
            raise ModelFileError("Non-finite value.", f"{pointer}/{i}")
    return np.asarray(data, dtype=float)


def load_scaling(data, arch: PcfArchitecture) -> Scaling | None:
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ModelFileError(f"Expected an object or null but got {type(data).__name__}.", "/scaling")
    for key in data:
        if key not in SCALING_SIZES:
            raise ModelFileError(f"Unknown key '{key}'.", f"/scaling/{key}")
    values = {}
    for key, dim in SCALING_SIZES.items():
        if key not in data:
            raise ModelFileError(f"Missing key '{key}'.", "/scaling")
        values[key] = load_numbers(data[key], f"/scaling/{key}", getattr(arch, dim))
        if key.endswith("_scale") and np.any(values[key] <= 0.0):
            raise ModelFileError("Scales must be positive.", f"/scaling/{key}")
    return Scaling(**values)
