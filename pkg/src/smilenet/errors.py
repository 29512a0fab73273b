"""Exception hierarchy shared by every smilenet module."""


class SmileNetError(Exception):
    """Base class for all errors raised by smilenet."""


class ShapeError(SmileNetError, ValueError):
    """An array does not have the shape an operation requires."""


class ConfigError(SmileNetError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class DataError(SmileNetError):
    """A dataset, manifest or image cannot be used."""


class PGMError(DataError):
    pass


class PGMMagicError(PGMError):
    pass


class PGMTruncatedError(PGMError):
    pass


class PGMMaxvalError(PGMError):
    pass


class TrainingDiverged(SmileNetError):
    """Raised when the loss becomes NaN or infinite."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class CheckpointError(SmileNetError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class SelectionError(SmileNetError):
    """An evaluator failed during model selection; ``report`` holds what finished."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report
