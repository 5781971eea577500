"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for invalid configuration: bad values, unknown keys, or
    geometry that cannot be honoured (e.g. overlapping phantom organs)."""


class NiftiParseError(ValueError):
    """Raised when a NIfTI-1 file cannot be parsed.

    The message names the offending header field so the failure is
    actionable without a hex dump.
    """


class UnsupportedDatatypeError(NiftiParseError):
    """Raised for structurally valid NIfTI files whose ``datatype`` code is
    outside the supported set."""


class CheckpointError(ValueError):
    """Raised when a checkpoint archive is missing members or its manifest
    disagrees with the stored arrays."""


class TrainingDiverged(RuntimeError):
    """Raised when the total loss becomes non-finite; the message carries the
    step and the individual loss components for diagnosis."""
