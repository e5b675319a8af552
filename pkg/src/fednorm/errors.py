"""Exception types shared across the package."""


class FedNormError(Exception):
    pass


class DimensionError(FedNormError, ValueError):
    pass


class NumericError(FedNormError, ArithmeticError):
    pass


class DegenerateNormError(NumericError):
    """A vector norm fell below the degenerate threshold."""


class ConfigError(FedNormError, ValueError):
    pass


class PartitionInfeasibleError(FedNormError, RuntimeError):
    pass


class IncompletePrototypeError(FedNormError, ValueError):
    pass


class EmptyTestsetError(FedNormError, ValueError):
    pass
