"""Exception hierarchy shared by all risense modules."""


class RisenseError(Exception):
    """Base class for every error raised by this package."""


class NonIntegerSymbolLength(RisenseError):
    pass


class BandExceedsCapture(RisenseError):
    pass


class RateMismatch(RisenseError):
    pass


class LengthMismatch(RisenseError):
    pass


class DimensionMismatch(RisenseError):
    pass


class EmptyFrame(RisenseError):
    pass


class FrameTooShort(RisenseError):
    pass


class DegenerateRange(RisenseError):
    pass


class InfeasiblePlacement(RisenseError):
    pass


class BandTooNarrow(RisenseError):
    pass


class UndefinedAp(RisenseError):
    """Raised when AP is requested for a class with no ground truth."""


class ConfigError(RisenseError):
    pass


class SchemaMismatch(RisenseError):
    pass
