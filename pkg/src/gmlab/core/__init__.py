from gmlab.core import tensor as ops
from gmlab.core.gradcheck import grad_check, numeric_grad
from gmlab.core.optim import Adam, clip_grad_norm, global_grad_norm
from gmlab.core.rng import Rng, gumbel_from_uniform, sample
from gmlab.core.tensor import Tape, Tensor, as_tensor, backward, constant, make_op, parameter

__all__ = [
    "Adam",
    "Rng",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "clip_grad_norm",
    "constant",
    "global_grad_norm",
    "grad_check",
    "gumbel_from_uniform",
    "make_op",
    "numeric_grad",
    "ops",
    "parameter",
    "sample",
]
