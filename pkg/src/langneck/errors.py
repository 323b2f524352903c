class KnownError(Exception):
    """Exception raised for known errors that should be displayed nicely to the user."""

    exit_code = 1


class ArgumentError(KnownError, ValueError):
    """Invalid argument: bad severity, sequence length, empty dataset, bad config value."""

    exit_code = 2


class DimensionError(KnownError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""

    exit_code = 2


class LabelError(KnownError, IndexError):
    """Class label outside [0, C)."""

    exit_code = 2


class FormatError(KnownError):
    """Exception raised for malformed dataset, vocabulary or checkpoint files."""

    exit_code = 3

    def __init__(self, message: str, path: str | None = None, offset: int | None = None):
        location = ""
        if path is not None:
            location += f" in {path}"
        if offset is not None:
            location += f" at offset {offset}"
        super().__init__(f"{message}{location}")
        self.path = path
        self.offset = offset


class ConfigError(KnownError):
    """Artifacts disagree: vocabulary hash, checkpoint or dataset mismatch."""

    exit_code = 3


class NumericalError(KnownError, FloatingPointError):
    """A primitive produced NaN/Inf or the training loss diverged."""

    exit_code = 4

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class TapeError(KnownError, RuntimeError):
    """Misuse of the differentiation tape."""

    exit_code = 4
