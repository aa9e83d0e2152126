"""Exception types shared across the library.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericsError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad dimensions, unknown keys, illegal flag combos."""


class DataError(ValueError):
    """Malformed or missing input data (dataset files, labels, parses)."""


class NumericsError(RuntimeError):
    """Non-finite values or a failed numerical check during a run."""


class ShapeError(ValueError):
    """Tensor operands with incompatible shapes."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""
