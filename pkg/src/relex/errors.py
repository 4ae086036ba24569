"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` (bad input, missing
files, malformed series) and ``NumericalError`` (the data is well formed but
the requested computation is degenerate). The CLI maps them to exit codes 2
and 3 respectively.
"""


class RelexError(Exception):
    """Base class for all errors raised by this package."""

    tensor = None


class ValidationError(RelexError, ValueError):
    pass


class NumericalError(RelexError, ArithmeticError):
    pass


# -- storage -----------------------------------------------------------------

class MissingIndex(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    def __init__(self, tensor, step, detail=""):
        msg = f"schema mismatch for tensor {tensor!r} at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.tensor = tensor
        self.step = step


class SeriesOrderError(ValidationError):
    pass


class CorruptBlob(ValidationError):
    def __init__(self, path, detail="checksum mismatch"):
        super().__init__(f"{path}: {detail}")
        self.path = path


class UnknownStep(ValidationError):
    pass


class UnknownTensor(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class IoFailure(ValidationError, OSError):
    pass


class ConfigError(ValidationError):
    pass


# -- trajectories and fits -----------------------------------------------------

class EmptyWindow(ValidationError):
    pass


class RankOutOfRange(ValidationError):
    pass


class BadStepIndex(ValidationError):
    pass


class TooFewPoints(ValidationError):
    pass


class DegenerateAbscissa(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DegenerateInterval(ValidationError):
    pass


class NotSymmetric(ValidationError):
    pass


class NotAMatrix(ValidationError):
    pass


class SizeExceeded(ValidationError):
    pass


class ZeroTrajectory(NumericalError):
    pass


class NearZeroSingularValue(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class DegenerateDirection(NumericalError):
    pass


class PowerIterationStall(NumericalError):
    pass
