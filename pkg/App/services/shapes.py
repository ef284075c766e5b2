from typing import Optional, Tuple

import torch

from App.core.errors import ShapeMismatchError


def expect_shape(name: str, tensor: torch.Tensor, shape: Tuple[Optional[int], ...]) -> None:
    """Raise ShapeMismatchError unless tensor matches shape (None = any size)."""
    if tensor.dim() != len(shape) or any(s is not None and s != t for s, t in zip(shape, tensor.shape)):
        pretty = tuple("B" if s is None else s for s in shape)
        raise ShapeMismatchError(f"{name} must have shape {pretty}, got {tuple(tensor.shape)}")
