"""Exception types shared across the package.

Each maps to one CLI exit code (see ``petnet.cli``).
"""


class PetnetError(Exception):
    exit_code = 1


class ShapeError(PetnetError, ValueError):
    exit_code = 3


class NumericError(PetnetError, ArithmeticError):
    exit_code = 4


class ConfigError(PetnetError, ValueError):
    exit_code = 2


class FormatError(PetnetError, ValueError):
    exit_code = 3


class UsageError(PetnetError, RuntimeError):
    exit_code = 1
