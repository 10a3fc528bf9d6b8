"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage 2, format 3, numerical 4.
"""


class KCPError(Exception):
    exit_code = 1


class UsageError(KCPError, ValueError):
    exit_code = 2


class FormatError(KCPError):
    exit_code = 3


class CheckpointError(FormatError):
    pass


class IDXError(FormatError):
    pass


class NumericalError(KCPError, ArithmeticError):
    exit_code = 4
