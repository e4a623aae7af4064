"""Exception hierarchy.

Every error raised on purpose by the package derives from ``StressLRPError``
and belongs to one of three families that the CLI maps to exit codes:
configuration (2), data (3) and numeric (4).
"""


class StressLRPError(Exception):
    exit_code = 1


class ConfigError(StressLRPError, ValueError):
    """Invalid parameters or configuration."""

    exit_code = 2


class DataError(StressLRPError, ValueError):
    exit_code = 3


class IngestError(DataError):
    """A manifest row references something that cannot be read."""


class ValidationError(DataError):
    """A record violates a structural invariant.

    ``field`` names the offending field.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class RangeError(DataError):
    pass


class FormatError(DataError):
    """Malformed or truncated file."""


class DependencyError(DataError):
    """An upstream artifact needed by a command is missing."""


class ShapeError(DataError):
    pass


class CanonizationError(DataError):
    pass


class AssignmentError(ConfigError):
    pass


class RegionError(DataError):
    pass


class NumericError(StressLRPError, ArithmeticError):
    exit_code = 4


class NormalizationError(NumericError):
    pass


class SingularityError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class UndefinedRatioError(NumericError):
    pass


class DegenerateCorrelationError(NumericError):
    pass
