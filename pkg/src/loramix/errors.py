"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class DegenerateVectorError(ValueError):
    """A vector required to have positive norm is (numerically) zero."""


class StateError(RuntimeError):
    """An operation was called out of order, e.g. gradients before forward."""


class FormatError(ValueError):
    """A payload could not be parsed into the expected structure.

    Carries the raw payload so callers can log what the remote side
    actually returned.
    """

    def __init__(self, message: str, payload: str | None = None):
        super().__init__(message)
        self.payload = payload


class ClientError(RuntimeError):
    """Transport-level failure talking to a remote service (retryable)."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class EvaluationError(RuntimeError):
    """An evaluation step could not produce a score at all."""
