"""Transferability-guided transformer adaptation over precomputed video features."""

from .autodiff import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
