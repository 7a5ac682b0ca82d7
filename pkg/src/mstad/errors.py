"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError/ContractError/MetricError/ReportError -> 2,
NumericError -> 3, IO failures -> 4, total sweep failure -> 5.
"""


class MstadError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(MstadError):
    """Operands with incompatible shapes; message names both shapes."""


class ConfigError(MstadError):
    """Invalid configuration value (unknown kind, bad factor, bad spec)."""


class ContractError(MstadError):
    """An operation was called outside its contract (non-scalar loss, empty input)."""


class NumericError(MstadError):
    """Non-finite values where finite ones are required; names the stage."""


class DataError(MstadError):
    """Invalid or insufficient data (short series, all-missing column)."""


class ParseError(DataError):
    """Malformed input file; message carries the line number."""


class SplitError(DataError):
    """A requested split cannot be formed (class with too few members)."""


class GenerationError(DataError):
    """Synthetic spec infeasible (ratio/length combination cannot be met)."""


class MetricError(MstadError):
    """Metric undefined for the given input (single-class AUC)."""


class ReportError(MstadError):
    """Report emission failed (nothing to write)."""
