"""Exception types raised across the package."""


class RetinaCamError(Exception):
    """Base class for all package errors."""


class DecodeError(RetinaCamError, ValueError):
    pass


class UnsupportedFormat(RetinaCamError, ValueError):
    pass


class NonFiniteField(RetinaCamError, ValueError):
    pass


class DimMismatch(RetinaCamError, ValueError):
    pass


class GeometryError(RetinaCamError, ValueError):
    pass


class EmptyStructure(RetinaCamError, ValueError):
    pass


class DegenerateFit(RetinaCamError, ValueError):
    pass


class ZeroChord(GeometryError):
    pass


class NonPositiveWidth(RetinaCamError, ValueError):
    pass


class InvalidCaliber(RetinaCamError, ValueError):
    pass


class DegenerateVariance(RetinaCamError, ValueError):
    pass


class DegenerateTable(RetinaCamError, ValueError):
    pass


class AllMissingFeature(RetinaCamError, ValueError):
    pass


class InsufficientNeighbors(RetinaCamError, ValueError):
    pass


class DegenerateTarget(RetinaCamError, ValueError):
    pass


class SingularSystem(RetinaCamError, ValueError):
    pass


class MissingClass(RetinaCamError, ValueError):
    pass


class EmptyGroup(RetinaCamError, ValueError):
    pass


class OutOfBounds(RetinaCamError, ValueError):
    pass


class NonConvergenceWarning(UserWarning):
    """Newton iterations stopped before reaching the gradient tolerance."""
