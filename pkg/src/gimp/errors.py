"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI uses when it escapes to the
top level.
"""


class GimpError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(GimpError, ValueError):
    exit_code = 4
    kind = "config"


class DimensionError(GimpError, ValueError):
    exit_code = 4
    kind = "dimension"


class NumericError(GimpError, ArithmeticError):
    exit_code = 5
    kind = "numeric"


class DataError(GimpError, ValueError):
    exit_code = 6
    kind = "data"


class MissingFileError(GimpError, FileNotFoundError):
    exit_code = 3
    kind = "missing-file"
