class DualPathError(Exception):
    """Base class for every diagnostic raised by this package."""


class FormatError(DualPathError, ValueError):
    """An input file does not conform to its documented format."""


class MalformedHeader(FormatError):
    pass


class IndexOutOfRange(FormatError):
    pass


class NonMonotoneIndices(FormatError):
    pass


class DimensionMismatch(FormatError):
    pass


class EmptyMask(DualPathError, ValueError):
    pass


class EmptyLift(DualPathError):
    """No cloud point satisfies the lift predicate for a 2D mask."""


class NoVisibleFrame(DualPathError):
    pass


class NoProjection(DualPathError):
    pass


class ZeroVector(DualPathError, ArithmeticError):
    pass


class ProviderError(DualPathError):
    def __init__(self, message, crop=None):
        super().__init__(message if crop is None else f"{message} (crop={crop})")
        self.crop = crop


class InfeasiblePacking(DualPathError):
    pass


class ConfigError(DualPathError, ValueError):
    pass
