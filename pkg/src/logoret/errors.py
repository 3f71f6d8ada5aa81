"""Exception hierarchy shared by every module of the package."""


class LogoRetError(Exception):
    """Base class for all package errors."""


class ZeroVector(LogoRetError, ValueError):
    pass


class DimensionMismatch(LogoRetError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class NotNormalized(LogoRetError, ValueError):
    pass


class InsufficientData(LogoRetError, ValueError):
    pass


class DegenerateCovariance(LogoRetError, ValueError):
    pass


class InsufficientClasses(LogoRetError, ValueError):
    pass


class InsufficientPositives(LogoRetError, ValueError):
    pass


class FormatError(LogoRetError, ValueError):
    """Bad magic, unsupported version or truncated binary file."""


class CorruptPayload(FormatError):
    """Checksum mismatch on an otherwise well-formed file."""


class DegenerateQuad(LogoRetError, RuntimeError):
    pass


class OutOfFrame(LogoRetError, ValueError):
    pass


class EmptyInput(LogoRetError, ValueError):
    pass


class NoPositives(LogoRetError, ValueError):
    pass


class EmptyQuerySet(LogoRetError, ValueError):
    pass


class EmptyCrop(LogoRetError, ValueError):
    pass


class MissingFeatureMap(LogoRetError, KeyError):
    pass
