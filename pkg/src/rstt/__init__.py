"""Space-time video super-resolution with a windowed spatio-temporal transformer,
built on a small numpy autodiff engine."""
from .autograd import Tape, Tensor, backward, finite_checks, precision
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError
from .model import RSTT, ModelConfig, build_query, count_params, init_params

__all__ = [
    "Tape", "Tensor", "backward", "finite_checks", "precision",
    "ConfigError", "ContractError", "DimensionError", "NonFiniteError",
    "RSTT", "ModelConfig", "build_query", "count_params", "init_params",
]
