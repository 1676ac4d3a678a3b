"""Teacher/student feature distillation: fit on synthetic pairs while a
reconstruction teacher watches the corresponding real volumes, then predict
segmentations with the student alone.
"""
from __future__ import annotations

from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .io import load_checkpoint, load_student_checkpoint, save_checkpoint
from .losses import distillation_loss
from .networks import ResidualUNet, UNetConfig
from .validation import ConfigurationError, check_divisible, check_same_shape
from .volume import LabelMap, SyntheticPair, Volume


def teacher_forward(net: ResidualUNet, volume: Volume
                    ) -> Tuple[Volume, List[torch.Tensor]]:
    """Reconstruct one real volume; returns (reconstruction, feature stack)."""
    if net.cfg.head != "rec":
        raise ValueError("teacher_forward needs a reconstruction-head network")
    x = torch.as_tensor(volume.data, dtype=torch.float32)[None, None]
    with torch.no_grad():
        out, feats = net(x)
    return Volume(out[0, 0].numpy().astype(np.float64), spacing=volume.spacing), feats


def student_forward(net: ResidualUNet, volume: Volume
                    ) -> Tuple[np.ndarray, List[torch.Tensor]]:
    """Segment one volume; returns (per-class logits (C, D, H, W), feature stack)."""
    if net.cfg.head != "seg":
        raise ValueError("student_forward needs a segmentation-head network")
    x = torch.as_tensor(volume.data, dtype=torch.float32)[None, None]
    with torch.no_grad():
        out, feats = net(x)
    return out[0].numpy(), feats


def infer_student(net: ResidualUNet, volume: Volume) -> LabelMap:
    """Argmax segmentation of one volume; the teacher is never evaluated."""
    logits, _ = student_forward(net, volume)
    return LabelMap(np.argmax(logits, axis=0), num_classes=net.cfg.num_classes)


class DistillationSegmenter(BaseEstimator):
    """Student segmentation network distilled from a reconstruction teacher.

    fit(pairs, reals) jointly optimizes the student on (synthetic image,
    synthetic label) pairs and the teacher on the real volumes those pairs were
    registered to, coupling them through the hint loss. predict(volume) runs
    the student alone.
    """

    def __init__(self, stage_widths=(16, 32, 64), num_classes=None,
                 lambda_recon=1.0, lambda_hint=1.0, hint_layers=2,
                 hint_metric="cosine", use_teacher=True, data_pairing="synthetic",
                 learning_rate=1e-3, epochs=200, batch_size=2, seed=0):
        self.stage_widths = stage_widths
        self.num_classes = num_classes
        self.lambda_recon = lambda_recon
        self.lambda_hint = lambda_hint
        self.hint_layers = hint_layers
        self.hint_metric = hint_metric
        self.use_teacher = use_teacher
        self.data_pairing = data_pairing
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _validate_params(self) -> None:
        if self.data_pairing not in ("synthetic", "real"):
            raise ConfigurationError(f"unknown data_pairing {self.data_pairing!r}")
        if self.hint_metric not in ("cosine", "l2"):
            raise ConfigurationError(f"unknown hint_metric {self.hint_metric!r}")
        if self.lambda_recon < 0 or self.lambda_hint < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not self.use_teacher and (self.lambda_recon > 0 or self.lambda_hint > 0):
            raise ConfigurationError(
                "teacher disabled: lambda_recon and lambda_hint must both be 0"
            )
        if not 1 <= self.hint_layers <= len(self.stage_widths):
            raise ConfigurationError(
                f"hint_layers must lie in [1, {len(self.stage_widths)}] "
                f"for {len(self.stage_widths)} stage widths"
            )
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def _student_config(self, num_classes: int) -> UNetConfig:
        return UNetConfig(stage_widths=tuple(self.stage_widths), head="seg",
                          num_classes=num_classes).validate()

    def _teacher_config(self) -> UNetConfig:
        return UNetConfig(stage_widths=tuple(self.stage_widths), head="rec").validate()

    # -- training ------------------------------------------------------------

    def fit(self, pairs: Sequence[SyntheticPair],
            reals: Union[Mapping, Sequence[Volume]]) -> "DistillationSegmenter":
        self._validate_params()
        if len(pairs) == 0:
            raise ValueError("no training pairs")
        if self.batch_size < 1 or self.batch_size > len(pairs):
            raise ValueError(f"batch_size {self.batch_size} must be in [1, {len(pairs)}]")

        def lookup(source_id):
            try:
                return reals[source_id]
            except (KeyError, IndexError, TypeError):
                raise ValueError(f"source_id {source_id!r} does not resolve to a real volume")

        matched = [lookup(p.source_id) for p in pairs]
        shape = pairs[0].image.shape
        num_classes = self.num_classes or pairs[0].labels.num_classes
        for p, r in zip(pairs, matched):
            check_same_shape(p.image.shape, shape, "pair images")
            check_same_shape(r.shape, shape, "real volume and pair")
            if p.labels.num_classes > num_classes:
                raise ValueError("pair labels exceed the configured class count")
        check_divisible(shape, 2 ** (len(self.stage_widths) - 1))

        torch.manual_seed(self.seed)
        student = ResidualUNet(self._student_config(num_classes))
        teacher = ResidualUNet(self._teacher_config()) if self.use_teacher else None
        params = list(student.parameters())
        if teacher is not None:
            params += list(teacher.parameters())
        optimizer = torch.optim.Adam(params, lr=self.learning_rate)
        shuffler = torch.Generator().manual_seed(self.seed + 1)

        synth = torch.stack(
            [torch.as_tensor(p.image.data, dtype=torch.float32) for p in pairs]
        )[:, None]
        labels = torch.stack([torch.as_tensor(p.labels.data) for p in pairs]).long()
        real = torch.stack(
            [torch.as_tensor(r.data, dtype=torch.float32) for r in matched]
        )[:, None]

        teacher_active = teacher is not None and (self.lambda_recon > 0 or self.lambda_hint > 0)
        history = []
        for _ in range(self.epochs):
            order = torch.randperm(len(pairs), generator=shuffler).tolist()
            sums = {"total": 0.0, "segmentation": 0.0, "reconstruction": 0.0, "hint": 0.0}
            student_src = synth if self.data_pairing == "synthetic" else real
            if self.data_pairing == "synthetic":
                # data-path guard: no real-image voxels may reach the student
                assert student_src is not real
            for start in range(0, len(order), self.batch_size):
                batch = order[start:start + self.batch_size]
                student_in = student_src[batch]
                logits, sfeats = student(student_in)
                if teacher_active:
                    tin = real[batch]
                    recon, tfeats = teacher(tin)
                else:
                    tin = recon = tfeats = None
                total, parts = distillation_loss(
                    logits, labels[batch], real=tin, recon=recon,
                    student_feats=sfeats if teacher_active else None,
                    teacher_feats=tfeats,
                    lambda_recon=self.lambda_recon, lambda_hint=self.lambda_hint,
                    hint_layers=self.hint_layers, hint_metric=self.hint_metric,
                    batched=True,
                )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                w = len(batch) / len(pairs)
                for key in sums:
                    sums[key] += parts[key] * w
            history.append(sums)

        student.eval()
        if teacher is not None:
            teacher.eval()
        self.student_ = student
        self.teacher_ = teacher
        self.num_classes_ = num_classes
        self.history_ = history
        return self

    # -- inference -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "student_"):
            raise RuntimeError("this segmenter is not fitted yet")

    def predict(self, volume: Volume) -> LabelMap:
        self._check_fitted()
        return infer_student(self.student_, volume)

    def predict_logits(self, volume: Volume) -> np.ndarray:
        self._check_fitted()
        logits, _ = student_forward(self.student_, volume)
        return logits

    # -- persistence ----------------------------------------------------------

    def _config_dict(self) -> dict:
        cfg = {k: (list(v) if isinstance(v, tuple) else v)
               for k, v in self.get_params().items()}
        cfg["num_classes"] = self.num_classes_
        return cfg

    def save_checkpoint(self, path) -> None:
        self._check_fitted()
        state = {f"student.{k}": v for k, v in self.student_.state_dict().items()}
        if self.teacher_ is not None:
            state.update({f"teacher.{k}": v for k, v in self.teacher_.state_dict().items()})
        save_checkpoint(path, kind="distill", config=self._config_dict(), state=state,
                        epoch=len(self.history_), history=self.history_)

    def save_student_checkpoint(self, path) -> None:
        self._check_fitted()
        save_checkpoint(path, kind="student", config=self._config_dict(),
                        state=self.student_.state_dict(), epoch=len(self.history_))

    @classmethod
    def from_checkpoint(cls, path) -> "DistillationSegmenter":
        payload = load_checkpoint(path, expected_kind="distill")
        config = dict(payload["config"])
        num_classes = config.pop("num_classes")
        est = cls(**{**config, "num_classes": num_classes})
        student = ResidualUNet(est._student_config(num_classes))
        student.load_state_dict({
            k[len("student."):]: v for k, v in payload["state"].items()
            if k.startswith("student.")
        })
        student.eval()
        teacher = None
        if any(k.startswith("teacher.") for k in payload["state"]):
            teacher = ResidualUNet(est._teacher_config())
            teacher.load_state_dict({
                k[len("teacher."):]: v for k, v in payload["state"].items()
                if k.startswith("teacher.")
            })
            teacher.eval()
        est.student_ = student
        est.teacher_ = teacher
        est.num_classes_ = num_classes
        est.history_ = payload["history"]
        return est

    @classmethod
    def load_student(cls, path) -> "DistillationSegmenter":
        """Build a predictor from a student-only checkpoint (lightweight inference)."""
        payload = load_student_checkpoint(path)
        config = dict(payload["config"])
        num_classes = config.pop("num_classes")
        est = cls(**{**config, "num_classes": num_classes})
        student = ResidualUNet(est._student_config(num_classes))
        student.load_state_dict(payload["state"])
        student.eval()
        est.student_ = student
        est.teacher_ = None
        est.num_classes_ = num_classes
        est.history_ = []
        return est
