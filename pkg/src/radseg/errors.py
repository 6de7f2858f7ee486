"""Exception types shared across the package."""


class RadsegError(Exception):
    """Base class for all package errors."""


class ContractViolation(RadsegError):
    """An operation was called with arguments violating its preconditions."""


class FormatError(RadsegError):
    """An on-disk artifact is malformed (wrong magic, truncated payload, ...)."""


class ValidationError(RadsegError):
    """Data parsed fine but violates a domain invariant."""


class GradientError(RadsegError):
    """Non-finite gradients encountered during an optimizer step."""


class PlacementError(RadsegError):
    """Scene generation could not place objects without overlap."""


class ConfigError(RadsegError):
    """A run configuration is invalid (unknown keys, bad values, missing paths)."""
