"""File formats: raw .npz volume containers, NIfTI-1 volumes, checkpoints, manifests.

Raw container (.npz)
    ``data``        the (D, H, W) array (dtype and shape carried by the format)
    ``spacing``     three float64 voxel sizes in mm
    ``num_classes`` present only for label maps

NIfTI support is a self-contained reader/writer for single-file .nii / .nii.gz
scalar volumes (the common datatypes, scl slope/intercept honored). Data is
returned in (dim1, dim2, dim3) axis order.

Checkpoints are torch.save files holding only primitives and tensors:
``{"kind", "config", "state", "epoch", "history"}``; they round-trip bit-exactly.
"""
from __future__ import annotations

import gzip
import json
import os
import struct
from typing import Optional, Tuple, Union

import numpy as np
import torch

from .volume import LabelMap, Volume

PathLike = Union[str, os.PathLike]


# ---------------------------------------------------------------------------
# raw container
# ---------------------------------------------------------------------------

def save_raw_volume(path: PathLike, volume: Volume) -> None:
    np.savez(path, data=volume.data, spacing=np.asarray(volume.spacing, dtype=np.float64))


def save_raw_labels(path: PathLike, labels: LabelMap,
                    spacing=(1.0, 1.0, 1.0)) -> None:
    np.savez(path, data=labels.data, spacing=np.asarray(spacing, dtype=np.float64),
             num_classes=np.int64(labels.num_classes))


def load_raw_volume(path: PathLike) -> Volume:
    with np.load(path) as f:
        return Volume(f["data"], spacing=tuple(f["spacing"]))


def load_raw_labels(path: PathLike) -> LabelMap:
    with np.load(path) as f:
        if "num_classes" not in f:
            raise ValueError(f"{path} is not a label container (missing num_classes)")
        return LabelMap(f["data"], num_classes=int(f["num_classes"]))


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _open_maybe_gz(path: PathLike, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path: PathLike) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    """Read a scalar 3D NIfTI-1 volume; returns (array, spacing_mm)."""
    with _open_maybe_gz(path, "rb") as f:
        hdr = f.read(352)
        if len(hdr) < 348:
            raise ValueError(f"{path}: truncated NIfTI header")
        order = "<"
        (sizeof_hdr,) = struct.unpack(order + "i", hdr[0:4])
        if sizeof_hdr != 348:
            order = ">"
            (sizeof_hdr,) = struct.unpack(order + "i", hdr[0:4])
            if sizeof_hdr != 348:
                raise ValueError(f"{path}: not a NIfTI-1 file")
        magic = hdr[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise ValueError(f"{path}: bad NIfTI magic {magic!r}")
        dim = struct.unpack(order + "8h", hdr[40:56])
        datatype, _bitpix = struct.unpack(order + "2h", hdr[70:74])
        pixdim = struct.unpack(order + "8f", hdr[76:108])
        (vox_offset,) = struct.unpack(order + "f", hdr[108:112])
        scl_slope, scl_inter = struct.unpack(order + "2f", hdr[112:120])
        if dim[0] < 3:
            raise ValueError(f"{path}: expected a 3D volume, got {dim[0]} dims")
        if any(d > 1 for d in dim[4:4 + max(0, dim[0] - 3)]):
            raise ValueError(f"{path}: multi-frame volumes are not supported")
        if datatype not in _NIFTI_DTYPES:
            raise ValueError(f"{path}: unsupported NIfTI datatype {datatype}")
        shape = (dim[1], dim[2], dim[3])
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
        f.seek(int(vox_offset))
        count = int(np.prod(shape))
        buf = f.read(count * dtype.itemsize)
        if len(buf) < count * dtype.itemsize:
            raise ValueError(f"{path}: truncated NIfTI data section")
        arr = np.frombuffer(buf, dtype=dtype, count=count).reshape(shape, order="F")
        arr = arr.astype(dtype.newbyteorder("="))
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            slope = scl_slope if scl_slope != 0.0 else 1.0
            arr = arr.astype(np.float64) * slope + scl_inter
        spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
        return np.ascontiguousarray(arr), spacing


def write_nifti(path: PathLike, data: np.ndarray,
                spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a scalar 3D array as single-file NIfTI-1 (.nii or .nii.gz)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    if data.dtype not in _NIFTI_CODES:
        data = data.astype(np.int32 if np.issubdtype(data.dtype, np.integer)
                           else np.float32)
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _NIFTI_CODES[data.dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *[float(s) for s in spacing], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    with _open_maybe_gz(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(np.asfortranarray(data).tobytes(order="F"))


# ---------------------------------------------------------------------------
# generic volume loading
# ---------------------------------------------------------------------------

def load_volume(path: PathLike) -> Volume:
    p = str(path)
    if p.endswith(".npz"):
        return load_raw_volume(path)
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        arr, spacing = read_nifti(path)
        return Volume(arr.astype(np.float64), spacing=spacing)
    raise ValueError(f"unrecognized volume format: {path}")


def load_labels(path: PathLike, num_classes: Optional[int] = None) -> LabelMap:
    p = str(path)
    if p.endswith(".npz"):
        return load_raw_labels(path)
    if p.endswith(".nii") or p.endswith(".nii.gz"):
        arr, _ = read_nifti(path)
        if not np.all(arr == np.round(arr)):
            raise ValueError(f"{path}: labels must be integer-coded")
        arr = arr.astype(np.int64)
        c = num_classes if num_classes is not None else int(arr.max()) + 1
        return LabelMap(arr, num_classes=max(c, 2))
    raise ValueError(f"unrecognized label format: {path}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: PathLike, kind: str, config: dict, state: dict,
                    epoch: int = 0, history=None) -> None:
    payload = {
        "kind": kind,
        "config": config,
        "state": state,
        "epoch": int(epoch),
        "history": history if history is not None else [],
    }
    torch.save(payload, path)


def load_checkpoint(path: PathLike, expected_kind: Optional[str] = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise ValueError(
            f"{path}: expected a {expected_kind!r} checkpoint, got {payload.get('kind')!r}"
        )
    return payload


def load_student_checkpoint(path: PathLike) -> dict:
    """Load a student-only checkpoint, refusing anything that carries other weights."""
    payload = load_checkpoint(path, expected_kind="student")
    for key in payload["state"]:
        if key.startswith(("teacher", "registration")):
            raise ValueError(f"{path}: student checkpoint contains foreign weights ({key})")
    return payload


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

def save_manifest(path: PathLike, manifest: dict) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path: PathLike) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    for key in ("atlas", "train", "test"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest is missing the {key!r} section")
    return manifest


def resolve_manifest_path(manifest_path: PathLike, rel: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), rel)
