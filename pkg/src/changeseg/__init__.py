"""Change detection reduced to semantic segmentation, trained from scratch on CPU."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
