"""Exception types shared across the package."""


class MPCTError(Exception):
    """Base class for every error raised by mpct."""


class ShapeError(MPCTError, ValueError):
    """Operands have incompatible shapes."""


class NumericDomainError(MPCTError, ValueError):
    """A non-finite value reached a place that requires finite inputs."""


class ConfigError(MPCTError, ValueError):
    """Invalid configuration: bad field, missing pair, wrong domain count."""


class CheckpointError(MPCTError):
    """Checkpoint file is truncated, corrupted or of an unknown version."""


class DataError(MPCTError, ValueError):
    """Unreadable or inconsistent image data."""
