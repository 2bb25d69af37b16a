"""Exception types shared across the package."""


class VesselSslError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(VesselSslError):
    """Paired arrays (image/mask, prediction/target) have incompatible shapes."""


class RangeViolation(VesselSslError):
    """Array values fall outside their declared range, or a mask is non-binary."""


class DegenerateGeometry(VesselSslError):
    """Synthetic rendering could not produce a usable vessel mask."""


class IoFailure(VesselSslError):
    """A dataset or artifact could not be read or written."""


class PatchTooLarge(VesselSslError):
    """Requested patch size exceeds the source image."""


class GridMismatch(VesselSslError):
    """Predictions do not line up with the patch grid they claim to cover."""


class EmptyDataset(VesselSslError):
    """A dataset directory or index contains no usable samples."""


class BadInputDims(VesselSslError):
    """Network input dimensions violate the architecture's divisibility contract."""


class NonFiniteLoss(VesselSslError):
    """A loss term evaluated to NaN or infinity."""


class DegenerateInput(VesselSslError):
    """Input too small or too uniform for the requested computation."""


class BadCheckpoint(VesselSslError):
    """Checkpoint file is missing, corrupt, or has an unknown format version."""


class ModeMismatch(VesselSslError):
    """Inputs supplied to the classifier do not match its configured mode."""


class ConfigError(VesselSslError):
    """Run configuration is malformed, has unknown keys, or bad values."""
