"""Null-space constrained closed-form editing for a small numpy vision transformer."""

from .errors import ConfigError, FormatError, MissingArtifactError, NumericalError, ShapeError, XEditError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "MissingArtifactError",
    "NumericalError",
    "ShapeError",
    "XEditError",
    "__version__",
]
