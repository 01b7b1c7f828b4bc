"""Multi-range attention super-resolution on a small numpy autodiff core."""
from .errors import (
    CheckpointError, ConfigurationError, DimensionError, GeometryError, MatError,
    NonFiniteError, ValidationError,
)
from .model import (
    MATModel, ModelConfig, classical_preset, light_preset, load_checkpoint, mat_forward,
    save_checkpoint, tiny_preset,
)
from .tensor import Tape, Tensor, precision, set_debug, set_default_dtype

__version__ = "0.1.0"
