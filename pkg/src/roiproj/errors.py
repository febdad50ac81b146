"""Exception types shared across the package.

The CLI maps these onto exit codes, so new failure modes should reuse
one of the classes below instead of raising bare ValueError/RuntimeError.
"""


class InputError(ValueError):
    """A caller passed a value that violates an operation's precondition."""


class ConfigurationError(ValueError):
    """A layer stack or network configuration is internally inconsistent."""


class StateError(RuntimeError):
    """An operation was invoked in the wrong order (e.g. backward before forward)."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


class IntegrityError(RuntimeError):
    """Stored data failed a checksum or structural validation."""


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs (e.g. AP with no positives)."""


class UsageError(ValueError):
    """Bad command line or config-file usage."""
