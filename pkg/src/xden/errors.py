"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class XDenError(Exception):
    exit_code = 1


class ValidationError(XDenError, ValueError):
    """Malformed input: bad parameters, schema mismatch, unknown names."""

    exit_code = 2


class MaterialLookupError(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CoverageError(ValidationError):
    pass


class NonWatertightError(ValidationError):
    pass


class TruncationError(ValidationError):
    pass


class ShapeError(XDenError, ValueError):
    """Inputs are individually valid but inconsistent with each other."""

    exit_code = 3


class SaturationError(XDenError, ValueError):
    """A pixel with zero (or negative) intensity where a logarithm is required."""

    exit_code = 2

    def __init__(self, message, pixel=None, view=None):
        super().__init__(message)
        self.pixel = pixel
        self.view = view


class DegenerateError(XDenError, ValueError):
    exit_code = 5


class NumericalError(XDenError, ArithmeticError):
    exit_code = 5

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
