"""Exception types raised across kpshield."""
from sklearn.exceptions import NotFittedError


class KpShieldError(Exception):
    """Base class for every error raised by this package."""


class DataError(KpShieldError):
    """Problem with input data or a file on disk (CLI exit code 2)."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where = f" [{path}" + (f" @ byte {offset}" if offset is not None else "") + "]"
        super().__init__(message + where)


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class CountMismatch(DataError):
    pass


class IoFailure(DataError):
    pass


class ShapeMismatch(KpShieldError, ValueError):
    pass


class NonSymmetric(KpShieldError, ValueError):
    pass


class NoConvergence(KpShieldError, ArithmeticError):
    pass


class DegenerateImage(KpShieldError, ValueError):
    pass


class IndexOutOfRange(KpShieldError, IndexError):
    pass


class InvalidTarget(KpShieldError, ValueError):
    pass


class InvalidDims(KpShieldError, ValueError):
    pass


class EmptyDataset(KpShieldError, ValueError):
    pass


class EmptyTraining(KpShieldError, ValueError):
    pass


class SingleClassTraining(KpShieldError, ValueError):
    pass


class UntrainedModel(KpShieldError, NotFittedError):
    pass


class InsufficientSamples(KpShieldError, ValueError):
    pass


class InsufficientPairs(KpShieldError, ValueError):
    pass


class BatchError(KpShieldError):
    """Several items of a batch failed; ``failures`` holds ``(index, exc)`` pairs."""

    def __init__(self, failures):
        self.failures = list(failures)
        idx = ", ".join(str(i) for i, _ in self.failures)
        super().__init__(f"{len(self.failures)} item(s) failed at indices [{idx}]: "
                         f"{self.failures[0][1]!r}")
