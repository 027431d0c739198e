"""Exception types shared across the package."""


class DadetError(Exception):
    """Base class for all package errors."""


class ContractError(DadetError, ValueError):
    """A caller violated an operation's precondition (shape/id mismatch etc.)."""


class InvalidInputError(DadetError, ValueError):
    """Input data violates its type invariants (range, size)."""


class NotInitializedError(DadetError, RuntimeError):
    """Model weights were required but have not been loaded."""


class ConfigurationError(DadetError, ValueError):
    """A configuration value or external resource is unusable."""


class IngestionError(DadetError, ValueError):
    """A dataset entry failed validation during ingestion."""


class ModeError(DadetError, RuntimeError):
    """An operation was invoked in a training mode that disables it."""


class NonFiniteGradientError(DadetError, FloatingPointError):
    """A non-finite gradient reached the reversal layer."""


class NonFiniteLossError(DadetError, FloatingPointError):
    """A loss component became non-finite; the iteration must be aborted."""
