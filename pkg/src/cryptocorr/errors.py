"""Exception hierarchy shared by all modules.

CLI exit codes key off these classes: ``ConfigError`` -> 2,
``DataError`` -> 3, ``ModelFileError`` -> 4.
"""


class CryptoCorrError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CryptoCorrError, ValueError):
    pass


class DataError(CryptoCorrError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class DuplicateTimestampError(DataError):
    pass


class AlignmentError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class ZeroVarianceError(CryptoCorrError, ValueError):
    pass


class UndefinedCorrelationError(ZeroVarianceError):
    pass


class RankDeficiencyError(CryptoCorrError, ArithmeticError):
    pass


class NumericalError(CryptoCorrError, ArithmeticError):
    pass


class ModelFileError(CryptoCorrError, FileNotFoundError):
    pass
