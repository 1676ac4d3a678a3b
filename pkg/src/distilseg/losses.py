"""Loss terms for the registration stage and the distillation stage.

Every function returns a 0-dim torch tensor so gradients can flow to any
tensor input; all of them also accept Volume / DisplacementField / ndarray
inputs for direct evaluation. Similarity terms are returned negated where the
underlying quantity is a similarity, so every loss is minimized.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .validation import (
    as_field_tensor,
    as_image_tensor,
    check_same_shape,
    check_unit_range,
)
from .volume import LabelMap


@dataclass
class RegLossConfig:
    """Weights and knobs for the registration objective."""

    sim_kind: str = "local_cc"          # local_cc | mutual_information
    smooth_kind: str = "diffusion"      # diffusion | bending
    alpha: float = 1.0                  # smoothness weight
    beta: float = 0.01                  # contrastive weight
    cc_window: int = 9                  # local window edge, odd
    mi_bins: int = 32
    mi_sigma: Optional[float] = None    # Parzen bandwidth; default half a bin
    tau: float = 0.1                    # contrastive temperature
    epsilon: float = 1e-5               # variance stabilizer

    def validate(self) -> "RegLossConfig":
        if self.sim_kind not in ("local_cc", "mutual_information"):
            raise ValueError(f"unknown sim_kind {self.sim_kind!r}")
        if self.smooth_kind not in ("diffusion", "bending"):
            raise ValueError(f"unknown smooth_kind {self.smooth_kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.cc_window < 3 or self.cc_window % 2 == 0:
            raise ValueError("cc_window must be odd and >= 3")
        if self.mi_bins < 2:
            raise ValueError("mi_bins must be >= 2")
        if self.mi_sigma is not None and self.mi_sigma <= 0:
            raise ValueError("mi_sigma must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return self


def _as_batched_image(x, name: str) -> torch.Tensor:
    t = as_image_tensor(x, name)
    if t.ndim == 3:
        return t[None, None]
    if t.ndim == 4:
        return t[:, None]
    if t.ndim == 5:
        return t
    raise ValueError(f"{name} must be 3D, 4D, or 5D, got shape {tuple(t.shape)}")


def _as_batched_field(x, name: str = "field") -> torch.Tensor:
    t = as_field_tensor(x, name)
    if t.ndim == 4:
        return t[None]
    if t.ndim == 5:
        return t
    raise ValueError(f"{name} must have shape (3,D,H,W) or (B,3,D,H,W)")


# ---------------------------------------------------------------------------
# similarity terms
# ---------------------------------------------------------------------------

def local_cc_map(fixed, warped, cfg: Optional[RegLossConfig] = None) -> torch.Tensor:
    """Per-voxel squared local correlation over a cubic window (same padding)."""
    cfg = (cfg or RegLossConfig()).validate()
    i = _as_batched_image(fixed, "fixed")
    j = _as_batched_image(warped, "warped")
    check_same_shape(i.shape, j.shape, "fixed and warped")
    n = cfg.cc_window
    if n > min(i.shape[2:]):
        raise ValueError(f"cc_window {n} exceeds the smallest axis {min(i.shape[2:])}")

    pad = n // 2
    win = float(n ** 3)
    ones = torch.ones(n, dtype=i.dtype, device=i.device)
    kz = ones.reshape(1, 1, n, 1, 1)
    ky = ones.reshape(1, 1, 1, n, 1)
    kx = ones.reshape(1, 1, 1, 1, n)

    def box(x):
        # separable window sum; border windows replicate the edge voxel so
        # every window sees an affinely consistent sample set
        x = F.pad(x, (pad,) * 6, mode="replicate")
        x = F.conv3d(x, kz)
        x = F.conv3d(x, ky)
        return F.conv3d(x, kx)

    i_sum, j_sum = box(i), box(j)
    i2_sum, j2_sum, ij_sum = box(i * i), box(j * j), box(i * j)
    u_i, u_j = i_sum / win, j_sum / win

    cross = ij_sum - u_j * i_sum - u_i * j_sum + u_i * u_j * win
    i_var = i2_sum - 2 * u_i * i_sum + u_i * u_i * win
    j_var = j2_sum - 2 * u_j * j_sum + u_j * u_j * win
    return cross * cross / (i_var * j_var + cfg.epsilon)


def local_cc_loss(fixed, warped, cfg: Optional[RegLossConfig] = None) -> torch.Tensor:
    """Negative mean of the per-voxel squared local correlation, in [-1, 0]."""
    return -local_cc_map(fixed, warped, cfg).mean()


def _parzen_weights(x: torch.Tensor, bins: int, sigma: float) -> torch.Tensor:
    # x (B, N) in [0, 1] -> soft bin assignments (B, N, bins) summing to 1
    centers = (torch.arange(bins, dtype=x.dtype, device=x.device) + 0.5) / bins
    d = x.unsqueeze(-1) - centers
    return torch.softmax(-(d * d) / (2.0 * sigma * sigma), dim=-1)


def mi_loss(fixed, warped, cfg: Optional[RegLossConfig] = None) -> torch.Tensor:
    """Negative mutual information from a Parzen-window joint histogram.

    Intensities must be normalized to [0, 1]. Soft Gaussian bin assignments
    keep the estimate differentiable; shrinking the bandwidth recovers hard
    binning.
    """
    cfg = (cfg or RegLossConfig()).validate()
    i = _as_batched_image(fixed, "fixed")
    j = _as_batched_image(warped, "warped")
    check_same_shape(i.shape, j.shape, "fixed and warped")
    check_unit_range(i, "fixed")
    check_unit_range(j, "warped")

    b = i.shape[0]
    sigma = cfg.mi_sigma if cfg.mi_sigma is not None else 0.5 / cfg.mi_bins
    wi = _parzen_weights(i.reshape(b, -1), cfg.mi_bins, sigma)
    wj = _parzen_weights(j.reshape(b, -1), cfg.mi_bins, sigma)

    joint = torch.bmm(wi.transpose(1, 2), wj) / wi.shape[1]   # (B, bins, bins)
    pi = joint.sum(dim=2)
    pj = joint.sum(dim=1)

    def entropy(p):
        return -torch.special.xlogy(p, p).sum(dim=tuple(range(1, p.ndim)))

    mi = entropy(pi) + entropy(pj) - entropy(joint)
    return -mi.mean()


# ---------------------------------------------------------------------------
# smoothness regularizers
# ---------------------------------------------------------------------------

def diffusion_regularizer(field) -> torch.Tensor:
    """Mean squared forward-difference gradient of the displacement field.

    The forward difference at the last slice of each axis is defined as zero.
    """
    u = _as_batched_field(field)
    b = u.shape[0]
    n_vox = u.shape[2] * u.shape[3] * u.shape[4]
    total = u.new_zeros(())
    for axis in (2, 3, 4):
        d = u.narrow(axis, 1, u.shape[axis] - 1) - u.narrow(axis, 0, u.shape[axis] - 1)
        total = total + (d * d).sum()
    return total / (b * n_vox)


def _second_diff(u: torch.Tensor, axis_a: int, axis_b: int) -> torch.Tensor:
    # repeated forward differences restricted to their valid support
    d = u.narrow(axis_a, 1, u.shape[axis_a] - 1) - u.narrow(axis_a, 0, u.shape[axis_a] - 1)
    return d.narrow(axis_b, 1, d.shape[axis_b] - 1) - d.narrow(axis_b, 0, d.shape[axis_b] - 1)


def bending_energy(field) -> torch.Tensor:
    """Mean squared second derivative of the displacement field.

    Uses the six-term expansion with cross terms weighted twice; repeated
    forward differences are evaluated only where both steps stay in bounds,
    so the energy vanishes exactly on affine fields.
    """
    u = _as_batched_field(field)
    if min(u.shape[2:]) < 3:
        raise ValueError(f"every axis must have length >= 3, got {tuple(u.shape[2:])}")
    b = u.shape[0]
    n_vox = u.shape[2] * u.shape[3] * u.shape[4]
    total = u.new_zeros(())
    for a in (2, 3, 4):
        daa = _second_diff(u, a, a)
        total = total + (daa * daa).sum()
    for a, c in ((2, 3), (2, 4), (3, 4)):
        dac = _second_diff(u, a, c)
        total = total + 2.0 * (dac * dac).sum()
    return total / (b * n_vox)


# ---------------------------------------------------------------------------
# contrastive term
# ---------------------------------------------------------------------------

def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return (u * v).sum() / (nu * nv)


def contrastive_loss(anchor, positive, negatives: Sequence,
                     cfg: Optional[RegLossConfig] = None) -> torch.Tensor:
    """InfoNCE over cosine similarities; the positive pair stays in the denominator."""
    cfg = (cfg or RegLossConfig()).validate()
    a = as_image_tensor(anchor, "anchor").reshape(-1)
    p = as_image_tensor(positive, "positive").reshape(-1)
    if len(negatives) == 0:
        raise ValueError("contrastive loss needs at least one negative sample")
    negs = [as_image_tensor(n, "negative").reshape(-1) for n in negatives]
    for v in (p, *negs):
        if v.shape != a.shape:
            raise ValueError("all embeddings must share one dimension")

    sims = torch.stack([cosine_similarity(a, p)] + [cosine_similarity(a, n) for n in negs])
    logits = sims / cfg.tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def registration_loss(fixed, warped, field, anchor, positive, negatives,
                      cfg: Optional[RegLossConfig] = None,
                      ) -> Tuple[torch.Tensor, dict]:
    """Similarity + alpha * smoothness + beta * contrastive, with a per-term breakdown."""
    cfg = (cfg or RegLossConfig()).validate()
    sim = (local_cc_loss if cfg.sim_kind == "local_cc" else mi_loss)(fixed, warped, cfg)
    smooth = (diffusion_regularizer if cfg.smooth_kind == "diffusion" else bending_energy)(field)
    contrast = contrastive_loss(anchor, positive, negatives, cfg)
    total = sim + cfg.alpha * smooth + cfg.beta * contrast
    parts = {
        "similarity": float(sim.detach()),
        "smoothness": float(smooth.detach()),
        "contrastive": float(contrast.detach()),
        "total": float(total.detach()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# distillation terms
# ---------------------------------------------------------------------------

def _layer_cosine(a: torch.Tensor, b: torch.Tensor, batched: bool) -> torch.Tensor:
    if batched:
        af = a.reshape(a.shape[0], -1)
        bf = b.reshape(b.shape[0], -1)
        na = torch.linalg.vector_norm(af, dim=1)
        nb = torch.linalg.vector_norm(bf, dim=1)
        if torch.any(na == 0) or torch.any(nb == 0):
            raise ValueError("cosine hint loss is undefined for zero-norm features")
        return ((af * bf).sum(dim=1) / (na * nb)).mean()
    return cosine_similarity(a.reshape(-1), b.reshape(-1))


def hint_loss(student_feats: Sequence, teacher_feats: Sequence, num_layers: int,
              metric: str = "cosine", batched: bool = False) -> torch.Tensor:
    """Feature-distance term over the first ``num_layers`` entries of both stacks.

    Stacks are ordered from the layer closest to the output head. Cosine mode
    sums one-minus-cosine per layer (range [0, 2k]); l2 mode sums per-layer
    mean squared differences.
    """
    if metric not in ("cosine", "l2"):
        raise ValueError(f"hint metric must be 'cosine' or 'l2', got {metric!r}")
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if len(student_feats) < num_layers or len(teacher_feats) < num_layers:
        raise ValueError(
            f"feature stacks expose {len(student_feats)}/{len(teacher_feats)} layers, "
            f"need {num_layers}"
        )
    total = None
    for i in range(num_layers):
        a = as_image_tensor(student_feats[i], f"student layer {i}")
        b = as_image_tensor(teacher_feats[i], f"teacher layer {i}")
        check_same_shape(a.shape, b.shape, f"hint layer {i} features")
        if metric == "cosine":
            term = 1.0 - _layer_cosine(a, b, batched)
        else:
            term = ((a - b) ** 2).mean()
        total = term if total is None else total + term
    return total


def reconstruction_loss(real, recon) -> torch.Tensor:
    """Mean squared error between a real volume and its reconstruction."""
    a = _as_batched_image(real, "real")
    b = _as_batched_image(recon, "reconstruction")
    check_same_shape(a.shape, b.shape, "real and reconstruction")
    return ((a - b) ** 2).mean()


def segmentation_loss(logits, labels) -> torch.Tensor:
    """Mean voxelwise cross-entropy of softmax(logits) against integer labels.

    logits: (C, D, H, W) or (B, C, D, H, W); labels: matching integer map.
    """
    t = logits if isinstance(logits, torch.Tensor) else torch.as_tensor(logits)
    if t.ndim == 4:
        t = t[None]
    if t.ndim != 5:
        raise ValueError(f"logits must be (C,D,H,W) or (B,C,D,H,W), got {tuple(t.shape)}")
    if isinstance(labels, LabelMap):
        labels = labels.data
    lab = (labels if isinstance(labels, torch.Tensor) else torch.as_tensor(labels)).long()
    if lab.ndim == 3:
        lab = lab[None]
    check_same_shape(lab.shape, (t.shape[0],) + tuple(t.shape[2:]), "labels and logits grid")
    c = t.shape[1]
    if int(lab.max()) >= c or int(lab.min()) < 0:
        raise ValueError(f"label ids must lie in [0, {c - 1}]")
    logp = t - torch.logsumexp(t, dim=1, keepdim=True)
    picked = logp.gather(1, lab.unsqueeze(1)).squeeze(1)
    return -picked.mean()


def distillation_loss(logits, labels, real=None, recon=None,
                      student_feats: Optional[Sequence] = None,
                      teacher_feats: Optional[Sequence] = None,
                      lambda_recon: float = 1.0, lambda_hint: float = 1.0,
                      hint_layers: int = 2, hint_metric: str = "cosine",
                      batched: bool = False) -> Tuple[torch.Tensor, dict]:
    """Segmentation + lambda_recon * reconstruction + lambda_hint * hint.

    Teacher-side inputs may be omitted only when both weights are zero.
    Returns the total and a per-term breakdown for logging.
    """
    if lambda_recon < 0 or lambda_hint < 0:
        raise ValueError("loss weights must be non-negative")
    seg = segmentation_loss(logits, labels)
    total = seg
    parts = {"segmentation": float(seg.detach()), "reconstruction": 0.0, "hint": 0.0}
    if lambda_recon > 0:
        if real is None or recon is None:
            raise ValueError("lambda_recon > 0 requires the real volume and its reconstruction")
        rec = reconstruction_loss(real, recon)
        total = total + lambda_recon * rec
        parts["reconstruction"] = float(rec.detach())
    if lambda_hint > 0:
        if student_feats is None or teacher_feats is None:
            raise ValueError("lambda_hint > 0 requires both feature stacks")
        hint = hint_loss(student_feats, teacher_feats, hint_layers, hint_metric, batched)
        total = total + lambda_hint * hint
        parts["hint"] = float(hint.detach())
    parts["total"] = float(total.detach())
    return total, parts
