"""Deterministic synthetic 3D dataset: a labeled atlas plus deformed copies.

The atlas holds nested ellipsoid structures with one intensity band per class
and a faint smooth texture. Every population member is the atlas pushed
through a random smooth displacement field (ground-truth labels warped with
the same field) plus additive intensity noise. Everything is a pure function
of the seed.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .io import save_manifest, save_raw_labels, save_raw_volume
from .volume import AtlasPair, DisplacementField, LabelMap, Volume
from .warp import warp_labels, warp_volume


@dataclass
class ToySpec:
    shape: Tuple[int, int, int] = (32, 32, 32)
    num_volumes: int = 10          # training (unlabeled) members
    num_test: int = 5              # held-out members with ground truth
    num_classes: int = 4           # background + nested structures
    deform_magnitude: float = 4.0  # max |u| in voxels
    smoothness: float = 3.0        # Gaussian sigma for the random fields
    intensity_noise: float = 0.05
    intensity_bias: float = 0.15   # per-member smooth gain-field strength
    seed: int = 0

    def validate(self) -> "ToySpec":
        if min(self.shape) < 16:
            raise ValueError("toy volumes must be at least 16 voxels per axis")
        if self.num_volumes < 0 or self.num_test < 0:
            raise ValueError("volume counts must be non-negative")
        if self.num_classes < 2:
            raise ValueError("need at least background plus one structure")
        if self.deform_magnitude < 0 or self.deform_magnitude > min(self.shape) / 6:
            raise ValueError("deform_magnitude must keep structures in bounds")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")
        if self.intensity_noise < 0 or self.intensity_bias < 0:
            raise ValueError("intensity perturbations must be non-negative")
        return self


@dataclass
class ToyDataset:
    atlas: AtlasPair
    train: List[Tuple[Volume, LabelMap]]
    test: List[Tuple[Volume, LabelMap]]

    @property
    def population(self) -> List[Tuple[Volume, LabelMap]]:
        return list(self.train) + list(self.test)


def _make_atlas(spec: ToySpec, rng: np.random.Generator) -> AtlasPair:
    shape = np.asarray(spec.shape, dtype=float)
    center = (shape - 1) / 2.0
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in spec.shape], indexing="ij")

    labels = np.zeros(spec.shape, dtype=np.int64)
    n_struct = spec.num_classes - 1
    for k in range(n_struct):
        # shrink and nudge each nested structure so classes stay distinguishable
        frac = 0.38 * (1.0 - 0.55 * k / max(n_struct - 1, 1))
        semi = np.maximum(frac * shape, 2.5)
        offset = center + ((-1) ** k) * 0.05 * k * shape
        r2 = sum(((g - offset[i]) / semi[i]) ** 2 for i, g in enumerate(grids))
        labels[r2 <= 1.0] = k + 1

    levels = (np.arange(spec.num_classes) + 0.5) / spec.num_classes
    image = levels[labels]
    texture = ndimage.gaussian_filter(rng.standard_normal(spec.shape), 3.0)
    image = np.clip(image + 0.04 * texture, 0.0, 1.0)
    return AtlasPair(Volume(image), LabelMap(labels, num_classes=spec.num_classes))


def _random_field(spec: ToySpec, rng: np.random.Generator) -> DisplacementField:
    noise = rng.standard_normal((3,) + tuple(spec.shape))
    u = ndimage.gaussian_filter(noise, sigma=(0,) + (spec.smoothness,) * 3)
    peak = np.abs(u).max()
    if peak > 0 and spec.deform_magnitude > 0:
        u = u * (spec.deform_magnitude / peak)
    else:
        u = np.zeros_like(u)
    return DisplacementField(u)


def _make_member(spec: ToySpec, atlas: AtlasPair,
                 rng: np.random.Generator) -> Tuple[Volume, LabelMap]:
    field = _random_field(spec, rng)
    image = warp_volume(atlas.image, field, mode="trilinear")
    labels = warp_labels(atlas.labels, field)
    data = image.data
    if spec.intensity_bias > 0:
        # per-member smooth gain field: inter-subject appearance variation the
        # atlas does not represent
        bias = ndimage.gaussian_filter(rng.standard_normal(spec.shape), 6.0)
        peak = np.abs(bias).max()
        if peak > 0:
            data = data * (1.0 + spec.intensity_bias * bias / peak)
    data = data + rng.normal(0.0, spec.intensity_noise, size=spec.shape)
    member = Volume(np.clip(data, 0.0, 1.0))
    if set(np.unique(labels.data)) != set(range(spec.num_classes)):
        raise RuntimeError("toy deformation destroyed a structure; lower deform_magnitude")
    return member, labels


def generate_toy_dataset(spec: ToySpec) -> ToyDataset:
    """Build the atlas and the train/test members for a spec, deterministically."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    atlas = _make_atlas(spec, rng)
    train = [_make_member(spec, atlas, rng) for _ in range(spec.num_volumes)]
    test = [_make_member(spec, atlas, rng) for _ in range(spec.num_test)]
    return ToyDataset(atlas=atlas, train=train, test=test)


def write_toy_dataset(spec: ToySpec, out_dir) -> str:
    """Write the dataset as raw containers plus a split manifest; returns its path."""
    dataset = generate_toy_dataset(spec)
    os.makedirs(out_dir, exist_ok=True)

    def dump(prefix: str, volume: Volume, labels: LabelMap) -> dict:
        img_name, lab_name = f"{prefix}_image.npz", f"{prefix}_labels.npz"
        save_raw_volume(os.path.join(out_dir, img_name), volume)
        save_raw_labels(os.path.join(out_dir, lab_name), labels)
        return {"image": img_name, "labels": lab_name}

    manifest = {
        "num_classes": spec.num_classes,
        "atlas": dump("atlas", dataset.atlas.image, dataset.atlas.labels),
        "train": [dump(f"train_{i:03d}", v, l) for i, (v, l) in enumerate(dataset.train)],
        "test": [dump(f"test_{i:03d}", v, l) for i, (v, l) in enumerate(dataset.test)],
    }
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(path, manifest)
    return path
