"""Exception hierarchy shared by all modules."""


class SRNAMError(Exception):
    """Base class for library errors."""


class ShapeError(SRNAMError, ValueError):
    """An array or image has the wrong shape or resolution."""


class ManifestError(SRNAMError, ValueError):
    """A dataset manifest is missing, malformed or inconsistent."""


class ConfigError(SRNAMError, ValueError):
    """Invalid configuration value or schedule."""


class DivergenceError(SRNAMError, RuntimeError):
    """A loss or objective became non-finite."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(SRNAMError, RuntimeError):
    """A checkpoint is missing or incompatible with the requested use."""
