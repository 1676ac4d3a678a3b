"""Declarative run configuration: one YAML file drives the whole pipeline.

Schema (see README for the full key reference)::

    seed: 7
    output_dir: runs/toy
    data:
      manifest: data/manifest.json     # relative to this config file
      atlas: manifest                  # manifest | auto
      atlas_references: train          # train | test
    eval_labels: [1, 2, 3]             # optional; default: all foreground
    registration: {...}                # RegistrationAugmenter keyword arguments
    distillation: {...}                # DistillationSegmenter keyword arguments

The environment variable DISTILSEG_OUTPUT_ROOT, when set, is prepended to a
relative output_dir.
"""
from __future__ import annotations

import hashlib
import inspect
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import yaml

from .augment import RegistrationAugmenter
from .segment import DistillationSegmenter
from .validation import ConfigurationError

OUTPUT_ROOT_ENV = "DISTILSEG_OUTPUT_ROOT"


@dataclass
class DataConfig:
    manifest: str
    atlas: str = "manifest"             # manifest | auto
    atlas_references: str = "train"     # train | test

    def validate(self) -> "DataConfig":
        if self.atlas not in ("manifest", "auto"):
            raise ConfigurationError(f"data.atlas must be 'manifest' or 'auto', got {self.atlas!r}")
        if self.atlas_references not in ("train", "test"):
            raise ConfigurationError(
                f"data.atlas_references must be 'train' or 'test', got {self.atlas_references!r}"
            )
        return self


@dataclass
class PipelineConfig:
    data: DataConfig
    output_dir: str
    seed: int = 0
    eval_labels: Optional[List[int]] = None
    registration: dict = field(default_factory=dict)
    distillation: dict = field(default_factory=dict)

    def validate(self) -> "PipelineConfig":
        self.data.validate()
        _check_kwargs(self.registration, RegistrationAugmenter, "registration")
        _check_kwargs(self.distillation, DistillationSegmenter, "distillation")
        if not os.path.exists(self.data.manifest):
            raise ConfigurationError(f"manifest not found: {self.data.manifest}")
        return self

    def resolved_output_dir(self) -> str:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir


def _check_kwargs(kwargs: dict, estimator_cls, section: str) -> None:
    allowed = set(inspect.signature(estimator_cls.__init__).parameters) - {"self", "seed"}
    unknown = set(kwargs) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown {section} keys: {sorted(unknown)}; allowed: {sorted(allowed)}"
        )
    if "seed" in kwargs:
        raise ConfigurationError(f"{section}.seed is not allowed; set the top-level seed")


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    known = {"seed", "output_dir", "data", "eval_labels", "registration", "distillation"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"{path}: unknown top-level keys {sorted(unknown)}")
    for key in ("output_dir", "data"):
        if key not in raw:
            raise ConfigurationError(f"{path}: missing required key {key!r}")
    data_raw = raw["data"]
    if not isinstance(data_raw, dict) or "manifest" not in data_raw:
        raise ConfigurationError(f"{path}: data section needs a 'manifest' key")
    base = os.path.dirname(os.path.abspath(path))
    manifest = data_raw["manifest"]
    if not os.path.isabs(manifest):
        manifest = os.path.join(base, manifest)
    data = DataConfig(
        manifest=manifest,
        atlas=data_raw.get("atlas", "manifest"),
        atlas_references=data_raw.get("atlas_references", "train"),
    )
    cfg = PipelineConfig(
        data=data,
        output_dir=raw["output_dir"],
        seed=int(raw.get("seed", 0)),
        eval_labels=raw.get("eval_labels"),
        registration=raw.get("registration") or {},
        distillation=raw.get("distillation") or {},
    )
    return cfg.validate()


def fingerprint(payload: dict) -> str:
    """Stable short hash of a JSON-serializable payload."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
