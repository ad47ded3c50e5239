"""
Exception hierarchy for the FDR-HS toolkit.
Every error carries the process exit code the CLI reports for it.
"""


class FdrHsError(Exception):
    """Base class for toolkit errors."""
    exit_code = 3


class UsageError(FdrHsError, ValueError):
    """Invalid arguments, flags or configuration values."""
    exit_code = 1


class DataError(FdrHsError, ValueError):
    """Input data that is missing, malformed or inconsistent."""
    exit_code = 2


class DimensionError(DataError):
    """Array lengths or shapes that do not agree."""


class SchemaError(DataError):
    """A file whose columns or header do not match the documented schema."""


class NumericalError(FdrHsError):
    """A numerical procedure that could not produce a usable result."""
    exit_code = 3


class EmpiricalNullError(NumericalError):
    """Central matching found no central peak in the log density."""


class OracleInfeasibleError(UsageError):
    """Exhaustive enumeration requested beyond its supported size."""
