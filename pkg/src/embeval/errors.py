"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to.
"""


class EmbevalError(Exception):
    exit_code = 3


class ConfigError(EmbevalError, ValueError):
    exit_code = 2


class DataError(EmbevalError):
    exit_code = 3


class ParseError(DataError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ValidationError(DataError, ValueError):
    pass


class MissingEntryError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DegenerateSegmentError(DataError, ValueError):
    pass


class AlignmentGapError(DataError, ValueError):
    pass


class VocabularyError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(EmbevalError, ArithmeticError):
    exit_code = 4


class TaskUndefinedError(NumericError):
    pass


class DegenerateCorrelationError(NumericError):
    pass
