"""Exception hierarchy shared by all modules.

The CLI maps these to exit codes: DataError/ContractViolation -> 2,
DivergenceError -> 3.
"""


class HiertaxError(Exception):
    pass


class DataError(HiertaxError, ValueError):
    """Malformed input data, unknown labels, empty results."""


class ConfigError(HiertaxError, ValueError):
    pass


class DimensionError(HiertaxError, ValueError):
    pass


class ContractViolation(HiertaxError, RuntimeError):
    """An internal precondition was broken, e.g. a target probability of 0."""


class DivergenceError(HiertaxError, ArithmeticError):
    """Non-finite loss or gradient during training."""
