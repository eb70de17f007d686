"""conseq: coupled recurrent sequence decoding with graph-fused context.

N recurrent decoders run in lock step; at every step a gated graph network
with adaptive per-source attention fuses the decoders' previous outputs
into a context vector that each decoder consumes alongside its own. Ships
with a differentiable core, a synthetic coupled-sequence benchmark, a toy
relational captioning task, and consistency/diversity metrics.
"""

from .diffcore import Parameter, Tensor, backward, no_grad, sgd_step, zero_grads
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "no_grad",
    "sgd_step",
    "zero_grads",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "TrainingDivergedError",
    "__version__",
]
