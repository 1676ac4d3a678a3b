"""Input validation helpers shared by the losses, warps, and estimators."""
from __future__ import annotations

import numpy as np
import torch

from .volume import DisplacementField, LabelMap, Volume


class ConfigurationError(ValueError):
    """Raised for invalid configuration values or incompatible settings."""


def as_image_tensor(x, name: str = "image") -> torch.Tensor:
    """Accept a Volume, ndarray, or tensor and return a floating tensor.

    Tensors pass through unchanged (preserving dtype, device, and autograd
    graph); numpy input shares memory where possible.
    """
    if isinstance(x, Volume):
        x = x.data
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if not torch.is_floating_point(t):
        t = t.double()
    if not torch.all(torch.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return t


def as_field_tensor(x, name: str = "field") -> torch.Tensor:
    """Accept a DisplacementField, ndarray, or tensor of shape (..., 3, D, H, W)."""
    if isinstance(x, DisplacementField):
        x = x.data
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if not torch.is_floating_point(t):
        t = t.double()
    if t.ndim < 4 or t.shape[-4] != 3:
        raise ValueError(f"{name} must have shape (..., 3, D, H, W), got {tuple(t.shape)}")
    if not torch.all(torch.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return t


def as_label_array(x, name: str = "labels") -> np.ndarray:
    if isinstance(x, LabelMap):
        return x.data
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be integer-valued")
    return arr


def check_same_shape(a_shape, b_shape, what: str = "inputs") -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ValueError(f"{what} have mismatched shapes: {tuple(a_shape)} vs {tuple(b_shape)}")


def check_unit_range(t: torch.Tensor, name: str) -> None:
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(
            f"{name} must be normalized to [0, 1], got range "
            f"[{float(t.min()):.4g}, {float(t.max()):.4g}]"
        )


def check_divisible(shape, factor: int, what: str = "volume shape") -> None:
    if any(s % factor != 0 for s in shape):
        raise ConfigurationError(f"{what} {tuple(shape)} is not divisible by {factor}")
