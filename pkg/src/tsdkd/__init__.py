"""Token-selective dual knowledge distillation for tiny language models."""

from .errors import InvalidInputError, InvalidParameterError, NonFiniteError

__version__ = "0.1.0"

__all__ = ["InvalidInputError", "InvalidParameterError", "NonFiniteError", "__version__"]
