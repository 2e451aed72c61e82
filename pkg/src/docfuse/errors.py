"""Exception taxonomy.

Every library error carries an ``exit_code`` so the command-line front end can
map failures onto stable process exit statuses without string matching.
"""


class DocfuseError(Exception):
    exit_code = 1


class DimensionError(DocfuseError, ValueError):
    exit_code = 4


class ConfigError(DocfuseError, ValueError):
    exit_code = 4


class ValidationError(DocfuseError, ValueError):
    exit_code = 4


class CheckpointError(DocfuseError, ValueError):
    exit_code = 4


class InfeasibleError(DocfuseError, ValueError):
    exit_code = 4


class NumericError(DocfuseError, ArithmeticError):
    exit_code = 5


class TapeError(DocfuseError, RuntimeError):
    exit_code = 1


class DeterminismError(DocfuseError, RuntimeError):
    exit_code = 1
