"""Terraced-field segmentation and polygon vectorization on paired image + elevation tiles."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
