"""Exception types shared across the package."""


class MultiaccuracyError(Exception):
    """Base class for all package errors."""


class InvalidInput(MultiaccuracyError, ValueError):
    pass


class FormatError(MultiaccuracyError, ValueError):
    """Malformed file or payload. ``position`` locates the problem when known."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class EmptyGroup(MultiaccuracyError, ValueError):
    pass


class TrainingError(MultiaccuracyError, RuntimeError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class UnsupportedBaseline(MultiaccuracyError, TypeError):
    pass
