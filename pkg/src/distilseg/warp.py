"""Dense-displacement warping (a differentiable spatial resampler) and global NCC.

The resampler evaluates the input at p + u(p) for every voxel p. Out-of-bounds
sample positions clamp to the border voxel. Trilinear mode is differentiable
with respect to both the volume and the field; nearest mode preserves integer
values and is used for label maps.
"""
from __future__ import annotations

import numpy as np
import torch

from .validation import as_field_tensor, as_image_tensor, check_same_shape
from .volume import DisplacementField, LabelMap, Volume

_MODES = ("trilinear", "nearest")


def _coordinate_grid(shape, dtype, device=None) -> torch.Tensor:
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def _gather(vol: torch.Tensor, zi, yi, xi) -> torch.Tensor:
    # vol (B, C, D, H, W); zi/yi/xi (B, D, H, W) int64
    b, c, d, h, w = vol.shape
    lin = (zi * h + yi) * w + xi
    flat = vol.reshape(b, c, -1)
    idx = lin.reshape(b, 1, -1).expand(-1, c, -1)
    return flat.gather(2, idx).reshape(b, c, d, h, w)


def warp_tensor(vol: torch.Tensor, field: torch.Tensor, mode: str = "trilinear") -> torch.Tensor:
    """Warp a batched tensor by a batched displacement field.

    vol: (B, C, D, H, W); field: (B, 3, D, H, W) voxel-unit displacements.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
    if vol.shape[2:] != field.shape[2:] or field.shape[1] != 3:
        raise ValueError(
            f"field shape {tuple(field.shape)} does not match volume shape {tuple(vol.shape)}"
        )
    spatial = vol.shape[2:]
    grid = _coordinate_grid(spatial, field.dtype, field.device).unsqueeze(0)
    pos = grid + field
    # border clamping
    bounds = [s - 1 for s in spatial]
    pos = torch.stack(
        [pos[:, i].clamp(min=0.0, max=float(bounds[i])) for i in range(3)], dim=1
    )

    if mode == "nearest":
        idx = torch.round(pos).long()
        return _gather(vol, idx[:, 0], idx[:, 1], idx[:, 2])

    floor = torch.floor(pos)
    frac = pos - floor
    lo = [floor[:, i].long().clamp(0, bounds[i]) for i in range(3)]
    hi = [(lo[i] + 1).clamp(max=bounds[i]) for i in range(3)]
    t = [frac[:, i] for i in range(3)]

    out = None
    for dz, wz in ((0, 1 - t[0]), (1, t[0])):
        zi = lo[0] if dz == 0 else hi[0]
        for dy, wy in ((0, 1 - t[1]), (1, t[1])):
            yi = lo[1] if dy == 0 else hi[1]
            for dx, wx in ((0, 1 - t[2]), (1, t[2])):
                xi = lo[2] if dx == 0 else hi[2]
                corner = _gather(vol, zi, yi, xi)
                term = corner * (wz * wy * wx).unsqueeze(1)
                out = term if out is None else out + term
    return out


def warp_volume(volume: Volume, field: DisplacementField, mode: str = "trilinear") -> Volume:
    """Resample a volume through identity + field; returns a new Volume."""
    img = as_image_tensor(volume)
    f = as_field_tensor(field)
    check_same_shape(img.shape, f.shape[1:], "volume and field")
    out = warp_tensor(img[None, None], f[None], mode=mode)[0, 0]
    return Volume(out.numpy(), spacing=volume.spacing, intensity_range=volume.intensity_range)


def warp_labels(labels: LabelMap, field: DisplacementField) -> LabelMap:
    """Propagate integer labels through identity + field with nearest sampling."""
    f = as_field_tensor(field)
    check_same_shape(labels.shape, f.shape[1:], "labels and field")
    lab = torch.as_tensor(labels.data)
    out = warp_tensor(lab[None, None], f[None], mode="nearest")[0, 0]
    return LabelMap(out.numpy(), num_classes=labels.num_classes)


def ncc_score(a: Volume, b: Volume) -> float:
    """Global Pearson correlation of voxel intensities, in [-1, 1]."""
    x = as_image_tensor(a).detach().numpy().astype(np.float64).ravel()
    y = as_image_tensor(b).detach().numpy().astype(np.float64).ravel()
    check_same_shape(np.shape(a.data if isinstance(a, Volume) else a),
                     np.shape(b.data if isinstance(b, Volume) else b), "volumes")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.mean(xc * xc))
    sy = np.sqrt(np.mean(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("NCC is undefined for constant volumes")
    return float(np.mean(xc * yc) / (sx * sy))
