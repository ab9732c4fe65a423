import sys

from rich.console import Console
from rich.panel import Panel


class PcfError(Exception):
    """Base class for every error raised by the library."""


class InvalidInputError(PcfError):
    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class ConfigError(InvalidInputError):
    pass


class InvalidLabelError(InvalidInputError):
    pass


class NonFiniteError(PcfError):
    def __init__(self, message: str, layer: int | None = None):
        if layer is not None:
            message = f"{message} (first non-finite value in layer {layer})"
        super().__init__(message)
        self.layer = layer


class UnsupportedCombinationError(PcfError):
    pass


class FitFailedError(PcfError):
    pass


class SelectionFailedError(PcfError):
    pass


class ModelFileError(PcfError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class EmissionError(PcfError):
    def __init__(self, missing: list[str]):
        super().__init__(f"Template is missing snippets for node kind(s): {', '.join(missing)}")
        self.missing = missing


class BracketError(PcfError):
    pass


class CertificationError(PcfError):
    pass


# Errors caused by what the user handed us exit with 1, failures while computing exit with 2.
INPUT_ERRORS = (InvalidInputError, ModelFileError, EmissionError, UnsupportedCombinationError, FileNotFoundError)


def exit_code_for(error: Exception) -> int:
    return 1 if isinstance(error, INPUT_ERRORS) else 2


def error_and_exit(message: str, code: int = 1):
    panel = Panel(message, border_style="red", title="Error", title_align="left", highlight=True)
    Console(stderr=True).print(panel)
    sys.exit(code)
