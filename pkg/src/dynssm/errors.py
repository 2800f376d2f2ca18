"""Exception types shared across the package."""


class DynssmError(Exception):
    """Base class for all package errors."""


class ShapeError(DynssmError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(DynssmError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(DynssmError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class OracleError(DynssmError, RuntimeError):
    """A verification oracle could not run (e.g. non-deterministic function)."""


class NumericsError(DynssmError, ArithmeticError):
    """Non-finite values appeared where finite values are required."""


class ParseError(DynssmError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ContentError(DynssmError, ValueError):
    """Structurally valid input whose content is unusable."""


class SplitError(DynssmError, ValueError):
    """Dataset cannot be split as requested."""


class EvaluationError(DynssmError, ValueError):
    """Evaluation was requested on unusable input (e.g. an empty split)."""


class LengthError(DynssmError, ValueError):
    """A sequence exceeds a hard length cap."""
