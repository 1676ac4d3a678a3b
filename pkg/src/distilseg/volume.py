"""Core 3D value types: intensity volumes, label maps, and displacement fields.

All arrays use (D, H, W) axis order; displacement fields carry one leading
component axis, (3, D, H, W), with component c displacing along spatial
axis c in voxel units. Instances are treated as immutable once built.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

SpacingLike = Union[Tuple[float, float, float], list, np.ndarray]


def _as_spacing(spacing: SpacingLike) -> Tuple[float, float, float]:
    arr = np.asarray(spacing, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3 or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"spacing must be 3 positive finite values, got {spacing!r}")
    return (float(arr[0]), float(arr[1]), float(arr[2]))


@dataclass(frozen=True)
class Volume:
    """A scalar 3D image on a regular grid with physical voxel spacing in mm."""

    data: np.ndarray
    spacing: SpacingLike = (1.0, 1.0, 1.0)
    intensity_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive shape, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """An integer class map over the same grid as a Volume; class 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(data == np.round(data)):
                raise ValueError("label data must be integer-valued")
            data = data.astype(np.int64)
        else:
            data = data.astype(np.int64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be 3D with positive shape, got {data.shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 (background plus one class)")
        if data.min() < 0 or data.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"got range [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class DisplacementField:
    """A dense voxel-unit displacement u; the warp map is identity + u."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"field data must have shape (3, D, H, W), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class AtlasPair:
    """The single labeled (image, segmentation) example that seeds training."""

    image: Volume
    labels: LabelMap

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(
                f"atlas image shape {self.image.shape} != label shape {self.labels.shape}"
            )


@dataclass(frozen=True)
class SyntheticPair:
    """A labeled example produced by deforming the atlas onto one unlabeled volume."""

    image: Volume
    labels: LabelMap
    source_id: Union[int, str]

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(
                f"synthetic image shape {self.image.shape} != label shape {self.labels.shape}"
            )
