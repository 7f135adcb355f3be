"""Exception hierarchy shared by all modules."""


class RotadvError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(RotadvError, ValueError):
    pass


class ConfigurationError(RotadvError, ValueError):
    pass


class DegenerateInputError(RotadvError, ValueError):
    pass


class FormatError(RotadvError, ValueError):
    """A dataset, checkpoint or pool file is truncated, corrupt or of the wrong version."""


class ParseError(RotadvError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PoolMissError(RotadvError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "pool miss"


class UndefinedMetricError(RotadvError, ArithmeticError):
    pass
