"""Common exception types.

The hierarchy mirrors how failures are reported at the command line:
usage problems, invalid data/configuration, and numerical breakdowns map
to distinct exit codes.
"""


class UsageError(Exception):
    """Bad invocation: missing arguments, impossible flag combinations."""


class ValidationError(Exception):
    """Input violates a documented contract (data, config, labels)."""


class ManifestError(ValidationError):
    """Malformed manifest content; message carries the offending line."""


class ShapeError(ValidationError):
    """Operand shapes do not conform; message names both shapes."""


class NumericalError(Exception):
    """Non-finite values or numerical breakdown during computation."""


class UndefinedMetricError(Exception):
    """Metric has no defined value on this input (e.g. single-class truth)."""
