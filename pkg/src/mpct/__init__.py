"""Multi-path consistency for unsupervised image-to-image translation,
on a small numpy autodiff engine."""

from .errors import CheckpointError, ConfigError, DataError, MPCTError, NumericDomainError, ShapeError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "DataError", "MPCTError", "NumericDomainError", "ShapeError"]
