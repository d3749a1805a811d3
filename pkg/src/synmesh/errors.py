"""Exception types shared across the package.

The CLI maps these onto process exit codes; library code raises them directly.
"""


class SynmeshError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(SynmeshError):
    """Invalid configuration value or unknown config key."""


class ShapeError(SynmeshError, ValueError):
    """Array/tensor arguments have inconsistent or unsupported shapes."""


class DomainError(SynmeshError, ValueError):
    """A numeric argument is outside its documented domain."""


class StateError(SynmeshError, RuntimeError):
    """An operation was invoked before its preconditions were established."""


class DegeneracyError(SynmeshError, ValueError):
    """Geometric input is degenerate (e.g. collinear joints in an alignment)."""


class CapacityError(SynmeshError, ValueError):
    """More instances than the model or matcher supports."""


class TrainingError(SynmeshError, RuntimeError):
    """Non-finite loss or another unrecoverable failure inside a training loop.

    Carries the failing step index and a loss breakdown when available.
    """

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = dict(breakdown) if breakdown else {}


class ContainerError(SynmeshError, IOError):
    """Malformed, truncated or wrong-version container file.

    ``offset`` is the byte offset at which the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
