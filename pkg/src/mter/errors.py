"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyperparameter, threshold, or option value."""


class ShapeError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    """Raised when a gradient or loss becomes non-finite during training."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(IOError):
    pass
