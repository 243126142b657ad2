from .gradcheck import check_params, max_rel_error, numerical_grad
from .tensor import DomainError, ShapeError, Tape, Tensor, parameter

__all__ = [
    "DomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "check_params",
    "max_rel_error",
    "numerical_grad",
    "parameter",
]
