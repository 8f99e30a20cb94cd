"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/configuration problems are code 1,
data problems (corpus, images, checkpoints) code 2, numeric divergence code 3
and plain I/O failures (OSError) code 4.
"""


class SceneSpotError(Exception):
    """Base class for all scenespot errors."""


class UsageError(SceneSpotError):
    """An API or CLI call that cannot be satisfied as requested."""


class ConfigurationError(SceneSpotError):
    """Invalid or inconsistent configuration values."""


class DimensionError(SceneSpotError):
    """Tensor shapes that do not fit the requested operation."""


class LabelError(SceneSpotError):
    """Class label out of range; carries the offending row index."""

    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class NumericError(SceneSpotError):
    """Non-finite values where finite numbers are required."""


class DivergenceError(NumericError):
    """Training loss became non-finite; carries epoch and batch indices."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class DataError(SceneSpotError):
    """Problems with corpus contents, images or serialized models."""


class LoadError(DataError):
    """An image file could not be read or decoded; carries the path."""

    def __init__(self, message: str, path):
        super().__init__(message)
        self.path = path


class UnknownClassError(DataError):
    """A corpus directory or manifest row names a class outside the label map."""


class SplitError(DataError):
    """A stratified split cannot be produced (class too small, empty split)."""


class FrameSequenceError(DataError):
    """Frame timestamps out of order; carries the offending index."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before all declared records were read."""


class CheckpointShapeError(CheckpointError):
    """Tensor records disagree with the embedded architecture config."""
