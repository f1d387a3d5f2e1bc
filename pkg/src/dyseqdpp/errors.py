"""Exception hierarchy shared by every module."""


class DySeqError(Exception):
    """Base class for all package errors."""


class InvalidSubset(DySeqError, ValueError):
    pass


class InvalidKernel(DySeqError, ValueError):
    pass


class NumericalFailure(DySeqError, ArithmeticError):
    pass


class SingularKernel(NumericalFailure):
    pass


class CapacityExceeded(DySeqError, ValueError):
    pass


class ShapeError(DySeqError, ValueError):
    pass


class InvalidInput(DySeqError, ValueError):
    pass


class InvalidLength(DySeqError, ValueError):
    pass


class InvalidAction(DySeqError, ValueError):
    pass


class InvalidTrajectory(DySeqError, ValueError):
    pass


class MissingAnnotation(DySeqError, LookupError):
    pass


class DivergedError(DySeqError, FloatingPointError):
    pass


class ParseError(DySeqError, ValueError):
    pass


class VersionError(DySeqError, ValueError):
    pass
