"""Exception hierarchy. The CLI maps these onto its exit-code contract."""


class DynXLError(Exception):
    """Base class for all package errors."""


class ConfigError(DynXLError, ValueError):
    """An invalid configuration value; the message names the field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(DynXLError, ValueError):
    pass


class ShapeError(DynXLError, ValueError):
    pass


class NumericDomainError(DynXLError, ArithmeticError):
    pass


class GraphStateError(DynXLError, RuntimeError):
    pass


class ModelStateError(DynXLError, RuntimeError):
    """Memory or mask inconsistent with the model it is used with."""


class AdaptationError(DynXLError, RuntimeError):
    def __init__(self, message: str, parameter: str | None = None, segment: int | None = None):
        super().__init__(message)
        self.parameter = parameter
        self.segment = segment


class TrainingDivergedError(DynXLError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class ComparisonError(DynXLError, ValueError):
    pass


class FingerprintError(DynXLError, ValueError):
    pass


class MissingStatsError(DynXLError, RuntimeError):
    pass


class FormatError(DynXLError, ValueError):
    """A persisted file does not match its expected binary or text layout."""
