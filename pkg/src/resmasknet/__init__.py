"""Residual Masking Network for 7-class facial-expression recognition on a numpy autodiff core."""
from .tensor import Tensor, backward, create, no_grad, precision

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "create", "no_grad", "precision", "__version__"]
