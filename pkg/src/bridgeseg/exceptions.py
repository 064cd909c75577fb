"""Exception types raised across the package."""


class ArgumentError(ValueError):
    """Invalid argument value or shape."""


class FormatError(ValueError):
    """Missing or corrupt on-disk artifact (manifest, raster, checkpoint)."""


class NumericError(FloatingPointError):
    """Non-finite value encountered in an input or a loss term."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class DegenerateInputError(ValueError):
    """Statistic is undefined for the given input (zero variance, etc.)."""


class ContractError(RuntimeError):
    """A data contract was violated, e.g. target-domain labels in training."""


class CheckpointError(FormatError):
    """Checkpoint archive cannot be restored into the requested models."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
