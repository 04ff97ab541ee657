"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class NumericOverflowError(FloatingPointError):
    """A loss or gradient stopped being finite."""


class CheckpointError(ValueError):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class FormatError(ValueError):
    pass


class StageError(RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
