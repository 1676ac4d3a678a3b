"""End-to-end orchestration: atlas selection, the three pipeline stages,
per-stage resumability, ablation variants, and report/artifact persistence.

Stage layout under the run's output directory::

    config.yaml                  echo of the effective configuration
    stage1/registration.pt       deformation-model checkpoint (+ meta, history)
    stage1/synthetic/            one .npz per synthetic pair (+ pairs.json)
    stage2/<variant>/            distill.pt, student.pt, history, meta
    stage3/<variant>/            pred_*.npz, report.txt, report.json

Stage 3 opens only the student checkpoint; deleting every other checkpoint
leaves its output bit-identical.
"""
from __future__ import annotations

import json
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

from . import io
from .augment import RegistrationAugmenter
from .config import PipelineConfig, fingerprint
from .metrics import EvalReport, evaluate_cases, write_report
from .segment import DistillationSegmenter, student_forward
from .toy import ToySpec  # noqa: F401  (re-exported for CLI convenience)
from .validation import ConfigurationError
from .volume import AtlasPair, LabelMap, SyntheticPair, Volume
from .warp import ncc_score

ABLATION_VARIANTS = ("baseline-abs", "m1", "m2", "m3", "full", "hint-l2")


def variant_overrides(variant: str) -> dict:
    """Distillation-section overrides implementing each ablation variant."""
    if variant == "full":
        return {}
    if variant == "m1":
        return dict(use_teacher=False, lambda_recon=0.0, lambda_hint=0.0,
                    data_pairing="real")
    if variant == "m2":
        return dict(use_teacher=False, lambda_recon=0.0, lambda_hint=0.0,
                    data_pairing="synthetic")
    if variant == "m3":
        return dict(use_teacher=True, data_pairing="real")
    if variant == "hint-l2":
        return dict(hint_metric="l2")
    if variant.startswith("hint-layers-"):
        try:
            k = int(variant.rsplit("-", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad hint-layers variant {variant!r}")
        return dict(hint_layers=k)
    if variant == "baseline-abs":
        return {}
    raise ConfigurationError(
        f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS} "
        "or hint-layers-<k>"
    )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def normalize_volume(volume: Volume) -> Volume:
    """Min-max normalize intensities to [0, 1], recording the original range."""
    lo, hi = float(volume.data.min()), float(volume.data.max())
    if hi - lo <= 0:
        data = np.zeros_like(volume.data)
    else:
        data = (volume.data - lo) / (hi - lo)
    return Volume(data, spacing=volume.spacing, intensity_range=(lo, hi))


def select_atlas(candidates: Sequence[Volume], references: Sequence[Volume]) -> int:
    """Index of the candidate with the highest mean NCC against the references."""
    if len(candidates) == 0 or len(references) == 0:
        raise ValueError("candidates and references must be non-empty")
    best_idx, best_score = 0, -np.inf
    for i, cand in enumerate(candidates):
        score = float(np.mean([ncc_score(cand, ref) for ref in references]))
        if score > best_score:  # strict: ties keep the lowest index
            best_idx, best_score = i, score
    return best_idx


class Dataset:
    """Ingested, normalized volumes for one run."""

    def __init__(self, atlas: AtlasPair, train: List[Volume],
                 train_labels: List[Optional[LabelMap]],
                 test: List[Tuple[Volume, LabelMap]], num_classes: int,
                 spacing: Tuple[float, float, float]):
        self.atlas = atlas
        self.train = train
        self.train_labels = train_labels
        self.test = test
        self.num_classes = num_classes
        self.spacing = spacing


def load_dataset(cfg: PipelineConfig) -> Dataset:
    manifest = io.load_manifest(cfg.data.manifest)
    resolve = lambda rel: io.resolve_manifest_path(cfg.data.manifest, rel)

    def read_entry(entry):
        vol = normalize_volume(io.load_volume(resolve(entry["image"])))
        lab = None
        if entry.get("labels"):
            lab = io.load_labels(resolve(entry["labels"]),
                                 num_classes=manifest.get("num_classes"))
        return vol, lab

    train, train_labels = [], []
    for entry in manifest["train"]:
        vol, lab = read_entry(entry)
        train.append(vol)
        train_labels.append(lab)

    test = []
    for entry in manifest["test"]:
        vol, lab = read_entry(entry)
        if lab is None:
            raise ConfigurationError("test entries need ground-truth labels for evaluation")
        test.append((vol, lab))

    if cfg.data.atlas == "auto":
        labeled = [i for i, lab in enumerate(train_labels) if lab is not None]
        if not labeled:
            raise ConfigurationError("atlas auto-selection needs labeled train entries")
        refs = [v for v, _ in test] if cfg.data.atlas_references == "test" else train
        idx = labeled[select_atlas([train[i] for i in labeled], refs)]
        atlas = AtlasPair(train[idx], train_labels[idx])
        train = [v for i, v in enumerate(train) if i != idx]
        train_labels = [l for i, l in enumerate(train_labels) if i != idx]
    else:
        entry = manifest["atlas"]
        vol = normalize_volume(io.load_volume(resolve(entry["image"])))
        lab = io.load_labels(resolve(entry["labels"]),
                             num_classes=manifest.get("num_classes"))
        atlas = AtlasPair(vol, lab)

    return Dataset(
        atlas=atlas, train=train, train_labels=train_labels, test=test,
        num_classes=atlas.labels.num_classes, spacing=atlas.image.spacing,
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _write_meta(dirpath: str, fp: str) -> None:
    with open(os.path.join(dirpath, "meta.json"), "w") as f:
        json.dump({"fingerprint": fp}, f)


def _meta_matches(dirpath: str, fp: str) -> bool:
    try:
        with open(os.path.join(dirpath, "meta.json")) as f:
            return json.load(f).get("fingerprint") == fp
    except (OSError, json.JSONDecodeError):
        return False


def _write_history(dirpath: str, history) -> None:
    with open(os.path.join(dirpath, "history.json"), "w") as f:
        json.dump(history, f, indent=2, sort_keys=True)
        f.write("\n")


def _stage1_fingerprint(cfg: PipelineConfig) -> str:
    return fingerprint({
        "registration": cfg.registration,
        "seed": cfg.seed,
        "manifest": cfg.data.manifest,
        "atlas": cfg.data.atlas,
        "atlas_references": cfg.data.atlas_references,
    })


def run_stage1(cfg: PipelineConfig, data: Dataset, out_dir: str
               ) -> Tuple[RegistrationAugmenter, List[SyntheticPair]]:
    """Train the deformation model and synthesize one labeled pair per volume."""
    stage_dir = os.path.join(out_dir, "stage1")
    os.makedirs(stage_dir, exist_ok=True)
    ckpt = os.path.join(stage_dir, "registration.pt")
    fp = _stage1_fingerprint(cfg)

    if os.path.exists(ckpt) and _meta_matches(stage_dir, fp):
        print("stage1: reusing existing registration checkpoint", flush=True)
        augmenter = RegistrationAugmenter.from_checkpoint(ckpt, atlas=data.atlas)
    else:
        augmenter = RegistrationAugmenter(seed=cfg.seed, **cfg.registration)
        augmenter.fit(data.atlas, data.train)
        augmenter.save_checkpoint(ckpt)
        _write_history(stage_dir, augmenter.history_)
        _write_meta(stage_dir, fp)

    synth_dir = os.path.join(stage_dir, "synthetic")
    index_path = os.path.join(synth_dir, "pairs.json")
    if os.path.exists(index_path) and _meta_matches(synth_dir, fp):
        with open(index_path) as f:
            index = json.load(f)
        pairs = []
        for entry in index:
            with np.load(os.path.join(synth_dir, entry["file"])) as z:
                pairs.append(SyntheticPair(
                    image=Volume(z["image"], spacing=data.spacing),
                    labels=LabelMap(z["labels"], num_classes=int(z["num_classes"])),
                    source_id=int(entry["source_id"]),
                ))
        return augmenter, pairs

    os.makedirs(synth_dir, exist_ok=True)
    pairs = augmenter.transform(data.train)
    index = []
    for i, pair in enumerate(pairs):
        name = f"pair_{i:03d}.npz"
        np.savez(os.path.join(synth_dir, name), image=pair.image.data,
                 labels=pair.labels.data, num_classes=np.int64(pair.labels.num_classes))
        index.append({"file": name, "source_id": pair.source_id})
    with open(index_path, "w") as f:
        json.dump(index, f, indent=2)
    _write_meta(synth_dir, fp)
    return augmenter, pairs


def run_stage2(cfg: PipelineConfig, data: Dataset, pairs: List[SyntheticPair],
               out_dir: str, variant: str) -> str:
    """Train teacher and student; returns the student checkpoint path."""
    overrides = variant_overrides(variant)
    stage_dir = os.path.join(out_dir, "stage2", variant)
    os.makedirs(stage_dir, exist_ok=True)
    student_ckpt = os.path.join(stage_dir, "student.pt")
    fp = fingerprint({
        "stage1": _stage1_fingerprint(cfg),
        "distillation": cfg.distillation,
        "overrides": overrides,
        "variant": variant,
    })
    if os.path.exists(student_ckpt) and _meta_matches(stage_dir, fp):
        print(f"stage2[{variant}]: reusing existing distillation checkpoint", flush=True)
        return student_ckpt

    segmenter = DistillationSegmenter(seed=cfg.seed,
                                      **{**cfg.distillation, **overrides})
    segmenter.fit(pairs, data.train)
    segmenter.save_checkpoint(os.path.join(stage_dir, "distill.pt"))
    segmenter.save_student_checkpoint(student_ckpt)
    _write_history(stage_dir, segmenter.history_)
    _write_meta(stage_dir, fp)
    return student_ckpt


def _report_header(cfg: PipelineConfig, variant: str) -> Dict[str, str]:
    return {
        "variant": variant,
        "seed": str(cfg.seed),
        "config_fingerprint": fingerprint({
            "seed": cfg.seed,
            "registration": cfg.registration,
            "distillation": cfg.distillation,
            "eval_labels": cfg.eval_labels,
            "variant": variant,
        }),
        "torch": torch.__version__,
        "float_mode": "float32-deterministic",
        "columns": "label dsc hd95_mm",
    }


def run_stage3(cfg: PipelineConfig, data: Dataset, student_ckpt: str,
               out_dir: str, variant: str, dump_features: bool = False) -> EvalReport:
    """Student-only inference on the test split plus evaluation and reporting."""
    stage_dir = os.path.join(out_dir, "stage3", variant)
    os.makedirs(stage_dir, exist_ok=True)
    # lightweight inference: the one file opened here is the student checkpoint
    segmenter = DistillationSegmenter.load_student(student_ckpt)
    assert segmenter.teacher_ is None

    preds = []
    for i, (vol, _) in enumerate(data.test):
        pred = segmenter.predict(vol)
        preds.append(pred)
        np.savez(os.path.join(stage_dir, f"pred_{i:03d}.npz"), data=pred.data,
                 num_classes=np.int64(pred.num_classes),
                 spacing=np.asarray(data.spacing))
        if dump_features:
            _, feats = student_forward(segmenter.student_, vol)
            feat_dir = os.path.join(stage_dir, "features")
            os.makedirs(feat_dir, exist_ok=True)
            np.savez(os.path.join(feat_dir, f"case_{i:03d}.npz"),
                     **{f"layer_{j}": f[0].numpy() for j, f in enumerate(feats)})

    report = _evaluate_predictions(cfg, data, preds)
    write_report(report, os.path.join(stage_dir, "report.txt"),
                 os.path.join(stage_dir, "report.json"),
                 header=_report_header(cfg, variant))
    return report


def _evaluate_predictions(cfg: PipelineConfig, data: Dataset,
                          preds: Sequence[LabelMap]) -> EvalReport:
    labels = cfg.eval_labels or list(range(1, data.num_classes))
    truths = [lab for _, lab in data.test]
    return evaluate_cases(preds, truths, labels, spacing=data.spacing)


def run_baseline_abs(cfg: PipelineConfig, data: Dataset,
                     augmenter: RegistrationAugmenter, out_dir: str) -> EvalReport:
    """Atlas-propagation baseline: warped atlas labels, no student involved."""
    stage_dir = os.path.join(out_dir, "stage3", "baseline-abs")
    os.makedirs(stage_dir, exist_ok=True)
    preds = []
    for i, (vol, _) in enumerate(data.test):
        pred = augmenter.warp_atlas_labels(vol)
        preds.append(pred)
        np.savez(os.path.join(stage_dir, f"pred_{i:03d}.npz"), data=pred.data,
                 num_classes=np.int64(pred.num_classes),
                 spacing=np.asarray(data.spacing))
    report = _evaluate_predictions(cfg, data, preds)
    write_report(report, os.path.join(stage_dir, "report.txt"),
                 os.path.join(stage_dir, "report.json"),
                 header=_report_header(cfg, "baseline-abs"))
    return report


# ---------------------------------------------------------------------------
# top-level runs
# ---------------------------------------------------------------------------

def _prepare_run(cfg: PipelineConfig) -> str:
    torch.use_deterministic_algorithms(True)
    out_dir = cfg.resolved_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    echo = {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "data": {"manifest": cfg.data.manifest, "atlas": cfg.data.atlas,
                 "atlas_references": cfg.data.atlas_references},
        "eval_labels": cfg.eval_labels,
        "registration": cfg.registration,
        "distillation": cfg.distillation,
    }
    with open(os.path.join(out_dir, "config.yaml"), "w") as f:
        yaml.safe_dump(echo, f, sort_keys=True)
    return out_dir


def _staged(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigurationError, ValueError):
        raise
    except Exception as e:
        raise RuntimeError(f"{name} failed ({e}); partial state kept on disk") from e


def run_pipeline(cfg: PipelineConfig, variant: str = "full",
                 dump_features: bool = False, plots: bool = False) -> EvalReport:
    """Execute the three stages for one variant and return the evaluation report."""
    variant_overrides(variant)  # validate the name before any work
    out_dir = _prepare_run(cfg)
    data = _staged("stage0 (ingest)", load_dataset, cfg)
    augmenter, pairs = _staged("stage1 (registration)", run_stage1, cfg, data, out_dir)
    if variant == "baseline-abs":
        report = _staged("stage3 (baseline-abs)", run_baseline_abs, cfg, data,
                         augmenter, out_dir)
    else:
        student_ckpt = _staged(f"stage2 ({variant})", run_stage2, cfg, data,
                               pairs, out_dir, variant)
        report = _staged(f"stage3 ({variant})", run_stage3, cfg, data,
                         student_ckpt, out_dir, variant, dump_features)
    if plots:
        from .plots import plot_run
        plot_run(out_dir, variant)
    print(f"{variant}: mean DSC {report.mean_dsc:.4f} "
          f"(std {report.std_dsc:.4f}), mean HD95 {report.mean_hd95:.4f}", flush=True)
    return report


def run_ablation(cfg: PipelineConfig, variants: Sequence[str],
                 plots: bool = False) -> Dict[str, EvalReport]:
    """Run several variants over a shared stage 1 and write a side-by-side table."""
    reports = {}
    for variant in variants:
        reports[variant] = run_pipeline(cfg, variant=variant, plots=plots)
    out_dir = cfg.resolved_output_dir()
    lines = ["variant\tmean_dsc\tstd_dsc\tmean_hd95"]
    payload = {}
    for variant in variants:
        r = reports[variant]
        lines.append(f"{variant}\t{r.mean_dsc:.6f}\t{r.std_dsc:.6f}\t{r.mean_hd95:.6f}")
        payload[variant] = r.as_dict()
    with open(os.path.join(out_dir, "ablation.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return reports
