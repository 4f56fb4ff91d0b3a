"""Exception hierarchy shared by all nobs modules."""


class NobsError(Exception):
    """Base class for every error raised by this package."""


class CflViolation(NobsError):
    pass


class IncompatibleIc(NobsError):
    pass


class NonPhysicalState(NobsError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class KindMismatch(NobsError):
    pass


class GridMismatch(NobsError):
    pass


class TimeOutOfRange(NobsError):
    pass


class DivisionGuard(NobsError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ShapeMismatch(NobsError, ValueError):
    pass


class NotScalarLoss(NobsError, ValueError):
    pass


class BadMagic(NobsError):
    pass


class HeaderMismatch(NobsError):
    pass


class TruncatedPayload(NobsError):
    pass


class MissingCheckpoint(NobsError):
    pass


class ZeroReference(NobsError, ZeroDivisionError):
    pass


class IoError(NobsError, OSError):
    pass


class RecordFailure(NobsError):
    """A solver error raised while generating one dataset record."""

    def __init__(self, index, cause):
        super().__init__(f"record {index}: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause
