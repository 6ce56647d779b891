"""Exception hierarchy.

Every error carries a ``category`` used by the command-line front end to
report one of ``input``, ``capacity``, ``numerical`` or ``io``.
"""


class AlsError(Exception):
    category = "input"


class InputError(AlsError, ValueError):
    category = "input"


class ParseError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(AlsError):
    category = "input"


class CapacityError(AlsError):
    category = "capacity"

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class NumericalError(AlsError, ArithmeticError):
    """Cholesky breakdown; ``index`` is the offending batch entry."""

    category = "numerical"

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class IntegrityError(AlsError):
    category = "io"

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block
