"""Differentiable hair-structure extraction and two-phase hair image synthesis."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
