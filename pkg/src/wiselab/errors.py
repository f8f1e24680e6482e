"""Exception hierarchy shared by every module."""


class WiselabError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(WiselabError, ValueError):
    """Layouts, shapes or dimensions do not line up."""


class DomainError(WiselabError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class CodecError(WiselabError, ValueError):
    """A file could not be decoded (or a value could not be encoded)."""


class StateError(WiselabError, RuntimeError):
    """An object is not in a state that supports the requested operation."""


class DataError(WiselabError, ValueError):
    """A dataset does not satisfy an operation's requirements."""


class NumericError(WiselabError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FitError(WiselabError, ValueError):
    """A regression problem is degenerate."""


class UndefinedMetricError(WiselabError, ValueError):
    """A metric is undefined for the given inputs (e.g. a zero denominator)."""


class RenderError(WiselabError, ValueError):
    """A plot cannot be rendered from the given inputs."""


class ConfigError(WiselabError, ValueError):
    """An experiment configuration is malformed or inconsistent."""


class StageError(WiselabError, RuntimeError):
    """A pipeline stage failed; wraps the original error and names the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
