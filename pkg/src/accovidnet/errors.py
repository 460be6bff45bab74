"""Exception hierarchy shared by every subpackage."""


class ACCovidNetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ACCovidNetError, ValueError):
    """An architecture or run configuration is inconsistent with its input."""


class ArgumentError(ACCovidNetError, ValueError):
    """A function received values that violate its precondition."""


class NumericError(ACCovidNetError, ArithmeticError):
    """Non-finite values were found where finite ones are required."""


class StateError(ACCovidNetError, RuntimeError):
    """An operation was applied to a training state in the wrong phase."""


class FreezeViolationError(StateError):
    """A stage-2 update attempted to touch frozen encoder parameters."""


class CheckpointError(ACCovidNetError, ValueError):
    """A checkpoint container could not be read or does not fit the model."""


class ManifestError(ACCovidNetError, ValueError):
    """A dataset manifest failed to parse or validate."""


class IngestionError(ACCovidNetError, OSError):
    """An image file could not be decoded."""
