"""Exception hierarchy shared by every module."""


class TtcastError(Exception):
    """Base class for all package errors."""


class ShapeError(TtcastError, ValueError):
    pass


class ConfigError(TtcastError, ValueError):
    pass


class ContractError(TtcastError, RuntimeError):
    """A caller broke an operation's precondition."""


class NumericError(TtcastError, ArithmeticError):
    pass


class FormatError(TtcastError, ValueError):
    """A file failed to parse or verify; ``field`` names the offending part."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
