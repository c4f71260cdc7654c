"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI lives in cli.py; keep these classes
fine-grained so callers can catch the family they care about.
"""


class SmvitError(Exception):
    """Base class for all package errors."""


class ConfigError(SmvitError):
    """Invalid or inconsistent configuration."""


class ShapeError(SmvitError):
    """Tensor shapes incompatible with the requested operation."""


class TilingError(ShapeError):
    """Patch geometry does not tile the feature map exactly."""


class LabelError(SmvitError):
    """Class label out of range."""


class NumericError(SmvitError):
    """Non-finite value encountered where finiteness is required."""


class DegenerateBatchError(SmvitError):
    """Batch statistics requested on a batch too small to have any."""


class DataError(SmvitError):
    """Problems with dataset content or layout."""


class LayoutError(DataError):
    """Directory tree does not follow the expected dataset layout."""


class EmptyDatasetError(DataError):
    """No frames found under the dataset root."""


class BlankFrameError(DataError):
    """Silhouette frame contains no foreground pixels."""


class DegenerateStratumError(DataError):
    """A (subject, view, condition) stratum is too small to split."""


class ProtocolError(SmvitError):
    """Experimental-protocol violation (e.g. missing standard view)."""


class InsufficientPairsError(ProtocolError):
    """View-pairing produced no aligned sample pairs."""


class MissingFactorError(ProtocolError):
    """No conversion factor registered for the requested view."""


class CheckpointError(SmvitError):
    """Checkpoint file corrupt or inconsistent with the config."""


class ComparisonError(SmvitError):
    """Ablation runs are not comparable (different view sets)."""
