"""Exception types shared across the package."""


class UwsplatError(Exception):
    """Base class for all package specific errors."""


class MalformedPLY(UwsplatError):
    """Raised when a PLY file cannot be parsed; message carries file context."""


class IndexOutOfRange(UwsplatError, IndexError):
    """Raised when a voxel index falls outside the grid."""


class FewerThanKViews(UwsplatError):
    """Raised when fewer than two views are available for view statistics."""


class TapeMissing(UwsplatError):
    """Raised when a backward pass is requested without a forward tape."""


class NonDeterministicForward(UwsplatError):
    """Raised when two evaluations of a supposedly frozen forward differ."""


class DivergenceDetected(UwsplatError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class CheckpointError(UwsplatError):
    """Raised for unreadable, truncated or version mismatched checkpoints."""
