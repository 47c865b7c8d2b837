"""Exception hierarchy. Each class carries the CLI error category."""


class EnkfLstmError(Exception):
    category = "error"


class ShapeError(EnkfLstmError, ValueError):
    category = "data"


class DataError(EnkfLstmError, ValueError):
    category = "data"


class ConfigError(EnkfLstmError, ValueError):
    category = "config"


class NumericalError(EnkfLstmError, ArithmeticError):
    category = "numerical"

    def __init__(self, message, condition=None, context=None):
        super().__init__(message)
        self.condition = condition
        self.context = context or {}
