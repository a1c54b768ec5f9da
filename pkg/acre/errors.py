"""
Exception types raised by the acre library.

The command-line entry point catches AcreError and turns it into a one-line
machine-parsable error message.
"""


class AcreError(Exception):
    """Base class for every error raised by acre."""


class ConfigError(AcreError):
    """One or more configuration problems, reported all at once."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TripleFormatError(AcreError):
    """A triple file could not be parsed."""

    def __init__(self, path, message, line_number=None):
        self.path = str(path)
        self.line_number = line_number
        location = f"{self.path}:{line_number}" if line_number is not None else self.path
        super().__init__(f"{location}: {message}")


class ShapeError(AcreError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class TapeError(AcreError, RuntimeError):
    """The autodiff tape was used incorrectly."""


class TrainingDivergedError(AcreError, RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}, batch {batch}")


class CheckpointError(AcreError):
    """A checkpoint file is missing, corrupt or of an unsupported version."""
