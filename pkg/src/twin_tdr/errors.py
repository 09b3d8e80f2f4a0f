"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for inconsistent shapes, out-of-range hyperparameters or bad config."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient, target or loss contains NaN/Inf."""


class BufferNotReady(RuntimeError):
    """Raised when sampling from a replay buffer that holds too few transitions."""


class TrainingDiverged(RuntimeError):
    """Raised when a training run hits a non-finite loss."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
