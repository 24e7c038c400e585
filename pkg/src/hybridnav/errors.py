"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, infeasible geometry, unsupported options."""


class DataError(ValueError):
    """Invalid data passed to an operation (out-of-range values, empty class pools)."""


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss.

    Carries the index of the offending sample within the batch, when known.
    """

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class StartupError(FileNotFoundError):
    """A required artifact (checkpoint, dataset) is missing at startup."""


class EpisodeOver(RuntimeError):
    """Stepping a world whose episode already reached a terminal classification."""
