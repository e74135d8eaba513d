"""respox: breathing-to-SpO2 sequence regression with gated multi-head prediction."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
