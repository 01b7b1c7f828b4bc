"""Exception hierarchy shared by every module.

Validation problems (bad shapes, bad configuration, impossible attention
geometry) derive from :class:`ValidationError`; the CLI maps those to exit
code 1 and everything else to exit code 2.
"""


class MatError(Exception):
    """Base class for all errors raised by matsr."""


class ValidationError(MatError, ValueError):
    pass


class DimensionError(ValidationError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigurationError(ValidationError):
    """A hyperparameter or config value is invalid."""


class GeometryError(ValidationError):
    """An attention neighbourhood does not fit inside the feature map."""


class NonFiniteError(MatError, FloatingPointError):
    """NaN or Inf appeared where only finite values are allowed."""


class CheckpointError(MatError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass
