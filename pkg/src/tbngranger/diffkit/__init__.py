"""Small float64 differentiable kernel: autodiff, MLPs, optimizers, checkpoints."""
from . import autodiff, checkpoint, gradcheck, nn
from .autodiff import ShapeError, SingularMatrixError, Tensor, backward, solve
from .nn import Mlp2, Param, ParamStore, adam_step, sgd_step, value_and_grad


def matrix_inverse_solve(M, B, max_condition: float = 1e12) -> Tensor:
    """Differentiable ``X`` with ``M X = B``; raises on ill-conditioned ``M``."""
    return solve(M, B, max_condition=max_condition)


__all__ = [
    "Mlp2",
    "Param",
    "ParamStore",
    "ShapeError",
    "SingularMatrixError",
    "Tensor",
    "adam_step",
    "autodiff",
    "backward",
    "checkpoint",
    "gradcheck",
    "matrix_inverse_solve",
    "nn",
    "sgd_step",
    "solve",
    "value_and_grad",
]
