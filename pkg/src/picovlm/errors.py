"""Exception types shared across the package."""


class PicoVlmError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PicoVlmError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(PicoVlmError, RuntimeError):
    """Autodiff contract violation (bad root, missing tape, ...)."""


class DegenerateRowError(PicoVlmError, ValueError):
    """A softmax row has no unmasked entries."""


class ConfigError(PicoVlmError, ValueError):
    """Invalid or inconsistent configuration."""


class SelectionError(ConfigError):
    """A layer selection cannot be realised for the given depths."""


class WiringError(PicoVlmError, ValueError):
    """Model inputs do not match the requested operating mode."""


class DataError(PicoVlmError, ValueError):
    """Dataset ingestion or labelling problem."""


class DivergenceError(PicoVlmError, RuntimeError):
    """Training produced a non-finite loss."""


class TruncationError(PicoVlmError, ValueError):
    """A token sequence would exceed the model's maximum length."""


class RequestError(PicoVlmError, ValueError):
    """An introspection request referenced something that does not exist."""
