"""Exception hierarchy; the CLI maps these onto exit codes."""


class PopCnnError(Exception):
    """Base class for all package errors."""


class DataError(PopCnnError, ValueError):
    """Bad or inconsistent input data (CLI exit code 2)."""


class NumericError(PopCnnError, ArithmeticError):
    """Numerical failure such as a non-finite loss (CLI exit code 3)."""


class FormatError(DataError):
    """A file could not be decoded."""

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class AscHeaderError(FormatError):
    pass


class AscDimensionError(FormatError):
    pass


class AscValueError(FormatError):
    pass


class TileFormatError(FormatError):
    pass


class CheckpointFormatError(FormatError):
    pass


class ConfigError(DataError):
    pass
