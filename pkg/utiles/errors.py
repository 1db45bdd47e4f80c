# Exception hierarchy shared by every Icarus module.


class IcarusError(Exception):
    """Root of all errors raised by Icarus."""


class DistributionError(IcarusError, ValueError):
    """A distribution was built with parameters outside its domain."""


class ModelContractError(IcarusError):
    """A generative model broke the execution contract (observation count, replay values)."""


class AddressingError(IcarusError):
    """An address was reused with a different distribution family inside one trace."""


class NonFiniteGradientError(IcarusError, ArithmeticError):
    """A training step produced a non-finite loss or gradient."""


class TrainingDivergedError(IcarusError, ArithmeticError):
    """Too many consecutive training steps had to be skipped."""


class EssUndefinedError(IcarusError, ArithmeticError):
    """Every importance weight is zero, so the effective sample size is undefined."""


class CheckpointMismatchError(IcarusError):
    """A checkpoint does not belong to the requested model or architecture."""


class NetlistError(IcarusError, ValueError):
    """A circuit netlist is malformed."""


class ConfigError(IcarusError):
    """A command line or configuration file asked for something that does not exist."""
