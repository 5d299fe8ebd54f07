"""Shared exception types."""


class StepNavError(Exception):
    pass


class InvalidArgumentError(StepNavError, ValueError):
    """Caller violated a documented precondition."""


class OutOfBoundsError(StepNavError, IndexError):
    """World coordinate or cell index outside the map extent."""


class MapFormatError(StepNavError, ValueError):
    """Malformed map/problem file; message carries field context."""


class ConfigurationError(StepNavError, ValueError):
    """Missing layer, unknown config field, or inconsistent settings."""
