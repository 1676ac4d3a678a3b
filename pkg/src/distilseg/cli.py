"""Command-line interface.

Exit codes: 0 success, 2 invalid configuration or inputs, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="pipeline YAML configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distilseg",
        description="One-shot 3D segmentation via registration-synthesized labels "
                    "and reconstruction-guided distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate the deterministic toy dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--shape", type=int, nargs=3, default=(32, 32, 32),
                   metavar=("D", "H", "W"))
    p.add_argument("--num-volumes", type=int, default=10)
    p.add_argument("--num-test", type=int, default=5)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--deform", type=float, default=3.0, help="max displacement, voxels")
    p.add_argument("--smoothness", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("select-atlas", help="pick the candidate with highest mean NCC")
    p.add_argument("--manifest", required=True)
    p.add_argument("--references", choices=("train", "test"), default="train")

    for name, help_text in (
        ("train-reg", "stage 1: train the registration-based augmenter"),
        ("augment", "stage 1: write synthetic pairs (training the model if needed)"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_arg(p)

    p = sub.add_parser("train-distill", help="stage 2: train teacher and student")
    _add_config_arg(p)
    p.add_argument("--variant", default="full")

    p = sub.add_parser("infer", help="stage 3: student-only inference")
    _add_config_arg(p)
    p.add_argument("--variant", default="full")
    p.add_argument("--input", help="segment a single volume instead of the test split")
    p.add_argument("--output", help="prediction path for --input (.npz)")
    p.add_argument("--dump-features", action="store_true",
                   help="also dump per-layer student feature maps")

    p = sub.add_parser("evaluate", help="evaluate predictions against test labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True,
                   help="directory of pred_*.npz files, ordered like the test split")
    p.add_argument("--labels", type=int, nargs="*", default=None)
    p.add_argument("--out-prefix", default="report",
                   help="writes <prefix>.txt and <prefix>.json in --pred-dir")

    p = sub.add_parser("run", help="full pipeline: stages 1-3 plus the report")
    _add_config_arg(p)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--dump-features", action="store_true")

    p = sub.add_parser("ablate", help="run ablation variants over a shared stage 1")
    _add_config_arg(p)
    p.add_argument("--variant", action="append", required=True,
                   help="repeatable: baseline-abs, m1, m2, m3, full, hint-l2, "
                        "hint-layers-<k>")
    p.add_argument("--plots", action="store_true")
    return parser


def _cmd_make_toy(args) -> int:
    from .toy import ToySpec, write_toy_dataset

    spec = ToySpec(shape=tuple(args.shape), num_volumes=args.num_volumes,
                   num_test=args.num_test, num_classes=args.num_classes,
                   deform_magnitude=args.deform, smoothness=args.smoothness,
                   intensity_noise=args.noise, seed=args.seed)
    path = write_toy_dataset(spec, args.out)
    print(f"wrote toy dataset manifest: {path}")
    return 0


def _cmd_select_atlas(args) -> int:
    from . import io
    from .pipeline import normalize_volume, select_atlas

    manifest = io.load_manifest(args.manifest)
    resolve = lambda rel: io.resolve_manifest_path(args.manifest, rel)
    candidates = [normalize_volume(io.load_volume(resolve(e["image"])))
                  for e in manifest["train"]]
    refs = (manifest["test"] if args.references == "test" else manifest["train"])
    references = [normalize_volume(io.load_volume(resolve(e["image"]))) for e in refs]
    idx = select_atlas(candidates, references)
    print(f"selected train index {idx}: {manifest['train'][idx]['image']}")
    return 0


def _cmd_stagewise(args, command: str) -> int:
    from .config import load_config
    from .pipeline import load_dataset, run_pipeline, run_stage1, run_stage2, _prepare_run

    cfg = load_config(args.config)
    if command == "train-reg" or command == "augment":
        out_dir = _prepare_run(cfg)
        data = load_dataset(cfg)
        run_stage1(cfg, data, out_dir)
        print(f"stage1 artifacts in {os.path.join(out_dir, 'stage1')}")
        return 0
    if command == "train-distill":
        out_dir = _prepare_run(cfg)
        data = load_dataset(cfg)
        _, pairs = run_stage1(cfg, data, out_dir)
        ckpt = run_stage2(cfg, data, pairs, out_dir, args.variant)
        print(f"student checkpoint: {ckpt}")
        return 0
    raise AssertionError(command)


def _cmd_infer(args) -> int:
    from .config import load_config
    from .pipeline import load_dataset, run_stage3, _prepare_run
    from .segment import DistillationSegmenter, student_forward

    cfg = load_config(args.config)
    out_dir = cfg.resolved_output_dir()
    student_ckpt = os.path.join(out_dir, "stage2", args.variant, "student.pt")
    if not os.path.exists(student_ckpt):
        raise FileNotFoundError(
            f"student checkpoint not found: {student_ckpt} (run train-distill first)"
        )
    if args.input:
        from . import io

        if not args.output:
            raise ValueError("--input requires --output")
        segmenter = DistillationSegmenter.load_student(student_ckpt)
        from .pipeline import normalize_volume

        vol = normalize_volume(io.load_volume(args.input))
        pred = segmenter.predict(vol)
        np.savez(args.output, data=pred.data, num_classes=np.int64(pred.num_classes))
        if args.dump_features:
            _, feats = student_forward(segmenter.student_, vol)
            np.savez(os.path.splitext(args.output)[0] + "_features.npz",
                     **{f"layer_{j}": f[0].numpy() for j, f in enumerate(feats)})
        print(f"wrote {args.output}")
        return 0
    _prepare_run(cfg)
    data = load_dataset(cfg)
    report = run_stage3(cfg, data, student_ckpt, out_dir, args.variant,
                        dump_features=args.dump_features)
    print(f"mean DSC {report.mean_dsc:.4f}, mean HD95 {report.mean_hd95:.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    from . import io
    from .metrics import evaluate_cases, write_report

    manifest = io.load_manifest(args.manifest)
    resolve = lambda rel: io.resolve_manifest_path(args.manifest, rel)
    truths = [io.load_labels(resolve(e["labels"]), num_classes=manifest.get("num_classes"))
              for e in manifest["test"]]
    pred_files = sorted(f for f in os.listdir(args.pred_dir)
                        if f.startswith("pred_") and f.endswith(".npz"))
    if len(pred_files) != len(truths):
        raise ValueError(
            f"found {len(pred_files)} predictions for {len(truths)} test cases"
        )
    preds = []
    for name in pred_files:
        with np.load(os.path.join(args.pred_dir, name)) as z:
            preds.append(z["data"])
    labels = args.labels or list(range(1, int(manifest.get("num_classes", 2))))
    spacing = (1.0, 1.0, 1.0)
    report = evaluate_cases(preds, [t.data for t in truths], labels, spacing)
    prefix = os.path.join(args.pred_dir, args.out_prefix)
    write_report(report, prefix + ".txt", prefix + ".json",
                 header={"columns": "label dsc hd95_mm"})
    print(f"mean DSC {report.mean_dsc:.4f}; report at {prefix}.txt")
    return 0


def _cmd_run(args) -> int:
    from .config import load_config
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    run_pipeline(cfg, variant="full", dump_features=args.dump_features,
                 plots=args.plots)
    return 0


def _cmd_ablate(args) -> int:
    from .config import load_config
    from .pipeline import run_ablation

    cfg = load_config(args.config)
    run_ablation(cfg, args.variant, plots=args.plots)
    out_dir = cfg.resolved_output_dir()
    print(f"comparative report: {os.path.join(out_dir, 'ablation.txt')}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-toy":
            return _cmd_make_toy(args)
        if args.command == "select-atlas":
            return _cmd_select_atlas(args)
        if args.command in ("train-reg", "augment", "train-distill"):
            return _cmd_stagewise(args, args.command)
        if args.command == "infer":
            return _cmd_infer(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        raise AssertionError(args.command)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
