"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``mdfusion.cli``).
"""


class MdFusionError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(MdFusionError, ValueError):
    pass


class DomainError(MdFusionError, ValueError):
    pass


class DegenerateInputError(MdFusionError, ValueError):
    pass


class ContractError(MdFusionError, ValueError):
    pass


class NumericError(MdFusionError, ArithmeticError):
    pass


class FormatError(MdFusionError, ValueError):
    pass


class ConsistencyError(MdFusionError, ValueError):
    pass


class InputError(MdFusionError, ValueError):
    pass


class ConfigError(MdFusionError, ValueError):
    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class UndefinedMetricError(MdFusionError, ValueError):
    pass


class ModelSelectionError(MdFusionError, RuntimeError):
    pass
