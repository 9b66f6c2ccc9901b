"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Incompatible shapes, dimensions or settings."""


class UsageError(ValueError):
    """An operation was called with arguments outside its contract."""


class CapacityError(ValueError):
    """A sequence does not fit the model's positional capacity."""


class EmptyProjectionError(ValueError):
    """Fewer encoder frames than the projector folding factor."""


class ManifestError(ValueError):
    """Malformed manifest or corpus file."""


class UndefinedWERError(ZeroDivisionError):
    """Corpus has no reference words, so WER is undefined."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient.

    ``snapshot`` holds a small diagnostic dict (step, stage, loss).
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class MissingStageError(FileNotFoundError):
    """A command needs the artifacts of an earlier pipeline stage."""
