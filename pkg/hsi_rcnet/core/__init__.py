"""
Numerics and learning: tensors, operators, networks, training
"""

from .tensor import Tape, Tensor, double_precision, grad_check, new_tensor

__all__ = ["Tape", "Tensor", "double_precision", "grad_check", "new_tensor"]
