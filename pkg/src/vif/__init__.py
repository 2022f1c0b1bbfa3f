"""Variational information-flow attender on a toy multimodal transformer."""

from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "Tensor", "backward", "grad_check", "no_grad", "__version__"]
