"""Exception hierarchy shared by every module."""


class ExrecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ExrecError, ValueError):
    pass


class NumericError(ExrecError, ArithmeticError):
    pass


class EmptyInputError(ExrecError, ValueError):
    pass


class ConfigError(ExrecError, ValueError):
    pass


class IngestError(ExrecError, ValueError):
    """Raised when an interaction log or concept map cannot be loaded.

    ``line`` is the 1-based line number in the offending file when known.
    """

    def __init__(self, message, line=None, path=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{': '.join(loc)}: {message}" if loc else message)
        self.line = line
        self.path = path


class ParseError(IngestError):
    pass


class ValidationError(IngestError):
    pass


class EmptyDatasetError(IngestError):
    pass


class StateError(ExrecError, RuntimeError):
    pass


class TrainingError(ExrecError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class ArtifactError(ExrecError, FileNotFoundError):
    """A required checkpoint or intermediate file is missing."""


class InconsistencyError(ExrecError, RuntimeError):
    """Artifacts on disk disagree with each other (e.g. dataset fingerprints)."""
