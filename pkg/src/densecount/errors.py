"""Exception hierarchy shared across the toolkit.

Split by how the caller should react: bad user input (AnnotationParseError,
ValidationError, FormatError), bad configuration or an incompatible
checkpoint (ConfigError, CheckpointError), and a run that went numerically
wrong (TrainingDivergedError).
"""


class DensecountError(Exception):
    """Base class for all toolkit errors."""


class AnnotationParseError(DensecountError):
    """Malformed annotation input (wrong columns, non-numeric fields, bad JSON)."""


class ValidationError(DensecountError):
    """Structurally valid input violating an invariant (dot out of bounds, degenerate box)."""


class FormatError(DensecountError):
    """Corrupt or unrecognized binary artifact (density map file, bad magic, truncation)."""


class ConfigError(DensecountError):
    """Inconsistent or out-of-range configuration values."""


class CheckpointError(DensecountError):
    """Unreadable checkpoint or parameter shapes that fail the config audit."""


class InsufficientNeighborsError(DensecountError):
    """Raised when a k-nearest-neighbor query needs at least two points."""


class TrainingDivergedError(DensecountError):
    """Loss became non-finite during training; message names epoch and step."""
