"""Exception types shared across the package."""


class TempoError(Exception):
    pass


class ShapeError(TempoError, ValueError):
    pass


class NumericsError(TempoError, ArithmeticError):
    pass


class ContractError(TempoError, ValueError):
    """A documented precondition was violated by the caller."""


class LimitError(TempoError, ValueError):
    pass


class FormatError(TempoError, ValueError):
    """Malformed or incompatible file contents."""

    def __init__(self, message, field=None, offset=None):
        super().__init__(message)
        self.field = field
        self.offset = offset
