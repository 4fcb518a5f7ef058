"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class MaskDiffError(Exception):
    exit_code = 1


class InvalidArgument(MaskDiffError, ValueError):
    exit_code = 2


class ResourceLimit(MaskDiffError):
    exit_code = 3


class NumericError(MaskDiffError, ArithmeticError):
    exit_code = 4


class ZeroSupport(NumericError):
    """Conditioning event has zero probability under the process."""
