"""Exception types shared across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SplatError, ValueError):
    """An argument is malformed, non-finite or out of its valid range."""


class NotVisibleError(InvalidInputError):
    """A point lies behind (or on) the camera's near plane."""


class DataFormatError(SplatError):
    """A file on disk is missing, malformed or inconsistent."""


class NumericalError(SplatError, ArithmeticError):
    """A computation produced non-finite values."""
