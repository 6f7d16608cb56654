class XEditError(Exception):
    """Base class for all package errors."""


class ShapeError(XEditError, ValueError):
    pass


class NumericalError(XEditError, ArithmeticError):
    pass


class ConfigError(XEditError, ValueError):
    pass


class MissingArtifactError(XEditError, FileNotFoundError):
    pass


class FormatError(XEditError, ValueError):
    """Malformed dataset or checkpoint file."""
