"""Exception types shared across the package."""


class OutOfRange(ValueError):
    """A value lies outside the range the model was trained on."""


class ShapeMismatch(ValueError):
    """An array does not have the shape a layer expects."""


class FailureEscalation(RuntimeError):
    """Cholesky factorization failed even at the largest allowed jitter."""


class OutOfGrid(ValueError):
    """A coordinate falls outside a gridded bathymetry field."""


class FormatError(ValueError):
    """A model or data file is malformed."""


class VersionMismatch(ValueError):
    """A model file was written by an incompatible format version."""
