"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto stable exit codes: usage/configuration problems
exit 1, data and ingestion problems exit 2, numeric failures exit 3.
"""


class PatchVadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PatchVadError):
    """Invalid configuration: bad shapes, incompatible flags, bad arguments."""


class DataError(PatchVadError):
    """Unreadable, malformed, or inconsistent input data."""


class EvaluationError(DataError):
    """Metric cannot be computed from the given scores/labels."""


class NumericError(PatchVadError):
    """Non-finite values or a numerically failed run."""
