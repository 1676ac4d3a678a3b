"""Segmentation evaluation: per-label Dice, HD95 surface distance, reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .validation import as_label_array, check_same_shape


def dice_score(pred, truth, label: int) -> float:
    """2|P∩T| / (|P|+|T|) for one label; 1.0 when both masks are empty."""
    p = as_label_array(pred, "pred") == label
    t = as_label_array(truth, "truth") == label
    check_same_shape(p.shape, t.shape, "pred and truth")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbor.

    Positions outside the array count as background, so foreground touching
    the array edge is boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = tuple(
            slice(0, -2) if a == axis else slice(1, -1) for a in range(3)
        )
        hi = tuple(
            slice(2, None) if a == axis else slice(1, -1) for a in range(3)
        )
        interior &= padded[lo] & padded[hi]
    return mask & ~interior


def hd95(pred, truth, label: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled bidirectional boundary distances, in mm."""
    p = as_label_array(pred, "pred") == label
    t = as_label_array(truth, "truth") == label
    check_same_shape(p.shape, t.shape, "pred and truth")
    if not p.any() or not t.any():
        raise ValueError(f"HD95 is undefined: label {label} has an empty mask")
    spacing = np.asarray(spacing, dtype=float)

    bp = boundary_mask(p)
    bt = boundary_mask(t)
    # distance at every voxel to the nearest boundary voxel of the other mask
    dist_to_t = ndimage.distance_transform_edt(~bt, sampling=spacing)
    dist_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)
    pooled = np.concatenate([dist_to_t[bp].ravel(), dist_to_p[bt].ravel()])
    return float(np.percentile(pooled, 95))


@dataclass
class EvalReport:
    """Per-label and aggregate segmentation metrics over a set of cases."""

    per_label: Dict[int, Tuple[float, float]]   # label -> (mean dsc, mean hd95 or nan)
    mean_dsc: float
    std_dsc: float
    mean_hd95: float
    notes: str = ""
    per_case_dsc: List[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        def clean(x):
            return None if (isinstance(x, float) and math.isnan(x)) else x

        return {
            "per_label": {
                str(k): {"dsc": clean(v[0]), "hd95_mm": clean(v[1])}
                for k, v in sorted(self.per_label.items())
            },
            "mean_dsc": clean(self.mean_dsc),
            "std_dsc": clean(self.std_dsc),
            "mean_hd95": clean(self.mean_hd95),
            "per_case_dsc": [clean(x) for x in self.per_case_dsc],
            "notes": self.notes,
        }


def evaluate_cases(preds: Sequence, truths: Sequence, labels: Sequence[int],
                   spacing=(1.0, 1.0, 1.0)) -> EvalReport:
    """Aggregate Dice and HD95 across cases for the given foreground labels.

    HD95 is undefined whenever either mask is empty for a label; those entries
    are excluded from the means and counted in the notes.
    """
    if len(preds) != len(truths):
        raise ValueError(f"got {len(preds)} predictions for {len(truths)} truths")
    if len(preds) == 0:
        raise ValueError("no cases to evaluate")
    if len(labels) == 0:
        raise ValueError("no labels to evaluate")

    dsc = np.zeros((len(preds), len(labels)))
    hd = np.full((len(preds), len(labels)), np.nan)
    undefined = 0
    for i, (p, t) in enumerate(zip(preds, truths)):
        for k, label in enumerate(labels):
            dsc[i, k] = dice_score(p, t, label)
            try:
                hd[i, k] = hd95(p, t, label, spacing)
            except ValueError:
                undefined += 1

    per_label = {}
    for k, label in enumerate(labels):
        col = hd[:, k]
        mean_hd = float(np.mean(col[~np.isnan(col)])) if np.any(~np.isnan(col)) else math.nan
        per_label[int(label)] = (float(np.mean(dsc[:, k])), mean_hd)

    case_dsc = dsc.mean(axis=1)
    case_hd = np.array([
        np.mean(row[~np.isnan(row)]) if np.any(~np.isnan(row)) else np.nan
        for row in hd
    ])
    defined_hd = case_hd[~np.isnan(case_hd)]
    notes = f"{undefined} undefined HD95 entries excluded" if undefined else ""
    return EvalReport(
        per_label=per_label,
        mean_dsc=float(case_dsc.mean()),
        std_dsc=float(case_dsc.std()),
        mean_hd95=float(defined_hd.mean()) if defined_hd.size else math.nan,
        notes=notes,
        per_case_dsc=[float(x) for x in case_dsc],
    )


def _fmt(x: float) -> str:
    return "undefined" if (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_report(report: EvalReport, txt_path, json_path,
                 header: Optional[Dict[str, str]] = None) -> None:
    """Write the line-oriented table and the structured key-value file.

    Output is byte-stable for identical inputs: fixed float formatting,
    sorted keys, no timestamps.
    """
    lines = []
    for key in sorted((header or {})):
        lines.append(f"# {key}: {header[key]}")
    lines.append("label\tdsc\thd95_mm")
    for label in sorted(report.per_label):
        d, h = report.per_label[label]
        lines.append(f"{label}\t{_fmt(d)}\t{_fmt(h)}")
    lines.append(f"mean\t{_fmt(report.mean_dsc)}\t{_fmt(report.mean_hd95)}")
    lines.append(f"std_dsc\t{_fmt(report.std_dsc)}\t-")
    if report.notes:
        lines.append(f"# note: {report.notes}")
    with open(txt_path, "w") as f:
        f.write("\n".join(lines) + "\n")

    payload = {"header": dict(sorted((header or {}).items())), "report": report.as_dict()}
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
