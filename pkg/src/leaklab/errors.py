"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class LeakLabError(Exception):
    exit_code = 1


class ConfigError(LeakLabError, ValueError):
    exit_code = 2


class DataError(LeakLabError, ValueError):
    exit_code = 3


class ArgumentError(DataError):
    """Invalid argument to a library operation (bad count, empty input, ...)."""


class ShapeError(ArgumentError):
    pass


class PathError(ArgumentError, KeyError):
    """A named submodule path does not resolve."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class CorruptionError(DataError):
    pass


class StateError(LeakLabError, RuntimeError):
    exit_code = 3


class NumericError(LeakLabError, ArithmeticError):
    exit_code = 4


class FormatError(LeakLabError):
    exit_code = 5


class StageError(LeakLabError):
    """A pipeline stage failed; names the stage and the resume checkpoint."""

    def __init__(self, stage: str, resume_from: str | None, cause: Exception):
        self.stage = stage
        self.resume_from = resume_from
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(
            f"stage {stage!r} failed: {cause} (resume from: {resume_from or 'start'})"
        )
