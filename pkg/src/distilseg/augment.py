"""Registration-based data augmentation: fit a deformation model on unlabeled
volumes against one labeled atlas, then transform those volumes into labeled
synthetic pairs.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .io import load_checkpoint, save_checkpoint
from .losses import (
    RegLossConfig,
    bending_energy,
    contrastive_loss,
    diffusion_regularizer,
    local_cc_loss,
    mi_loss,
)
from .networks import RegistrationNetwork, RegNetConfig
from .validation import ConfigurationError, check_divisible, check_same_shape
from .volume import AtlasPair, DisplacementField, LabelMap, SyntheticPair, Volume
from .warp import warp_labels, warp_tensor


class RegistrationAugmenter(BaseEstimator):
    """Learns atlas-to-volume deformations and emits labeled synthetic pairs.

    fit(atlas, volumes) trains the deformation network on the unlabeled
    volumes; transform(volumes) warps the atlas image and labels onto each
    of them. All randomness is derived from ``seed``.
    """

    def __init__(self, encoder_channels=(16, 32, 32, 32),
                 decoder_channels=(32, 32, 32, 16), embedding_dim=64,
                 sim="local_cc", smooth="diffusion", alpha=1.0, beta=0.01,
                 cc_window=9, mi_bins=32, mi_sigma=None, tau=0.1, epsilon=1e-5,
                 learning_rate=1e-4, epochs=500, batch_size=2, seed=0):
        self.encoder_channels = encoder_channels
        self.decoder_channels = decoder_channels
        self.embedding_dim = embedding_dim
        self.sim = sim
        self.smooth = smooth
        self.alpha = alpha
        self.beta = beta
        self.cc_window = cc_window
        self.mi_bins = mi_bins
        self.mi_sigma = mi_sigma
        self.tau = tau
        self.epsilon = epsilon
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _loss_config(self) -> RegLossConfig:
        return RegLossConfig(
            sim_kind=self.sim, smooth_kind=self.smooth, alpha=self.alpha,
            beta=self.beta, cc_window=self.cc_window, mi_bins=self.mi_bins,
            mi_sigma=self.mi_sigma, tau=self.tau, epsilon=self.epsilon,
        ).validate()

    def _net_config(self) -> RegNetConfig:
        return RegNetConfig(
            encoder_channels=tuple(self.encoder_channels),
            decoder_channels=tuple(self.decoder_channels),
            embedding_dim=self.embedding_dim,
        ).validate()

    # -- training ------------------------------------------------------------

    def fit(self, atlas: AtlasPair, volumes: Sequence[Volume]) -> "RegistrationAugmenter":
        cfg = self._loss_config()
        net_cfg = self._net_config()
        if len(volumes) < 2:
            raise ValueError(
                "need at least 2 unlabeled volumes (contrastive negatives come "
                "from the other samples)"
            )
        if self.batch_size < 1 or self.batch_size > len(volumes):
            raise ValueError(
                f"batch_size {self.batch_size} must be in [1, {len(volumes)}]"
            )
        if cfg.beta > 0 and self.batch_size < 2:
            raise ConfigurationError("beta > 0 requires batch_size >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for v in volumes:
            check_same_shape(v.shape, atlas.image.shape, "volume and atlas")
        check_divisible(atlas.image.shape, 2 ** net_cfg.num_stages)

        torch.manual_seed(self.seed)
        net = RegistrationNetwork(net_cfg)
        shuffler = torch.Generator().manual_seed(self.seed + 1)
        optimizer = torch.optim.Adam(net.parameters(), lr=self.learning_rate)

        atlas_t = torch.as_tensor(atlas.image.data, dtype=torch.float32)[None, None]
        targets = torch.stack(
            [torch.as_tensor(v.data, dtype=torch.float32) for v in volumes]
        )[:, None]

        sim_fn = local_cc_loss if cfg.sim_kind == "local_cc" else mi_loss
        smooth_fn = diffusion_regularizer if cfg.smooth_kind == "diffusion" else bending_energy

        history = []
        for _ in range(self.epochs):
            order = torch.randperm(len(volumes), generator=shuffler).tolist()
            batches = [order[i:i + self.batch_size]
                       for i in range(0, len(order), self.batch_size)]
            if len(batches) > 1 and len(batches[-1]) == 1:
                batches[-2].extend(batches.pop())  # avoid a negatives-free batch
            sums = {"total": 0.0, "similarity": 0.0, "smoothness": 0.0, "contrastive": 0.0}
            for batch in batches:
                tgt = targets[batch]
                atl = atlas_t.expand(len(batch), -1, -1, -1, -1)
                flow, emb_a, emb_t = net(atl, tgt)
                warped = warp_tensor(atl, flow)

                sim = sim_fn(tgt, warped, cfg)
                smooth = smooth_fn(flow)
                if cfg.beta > 0 and len(batch) >= 2:
                    terms = []
                    for i in range(len(batch)):
                        negatives = [emb_t[j] for j in range(len(batch)) if j != i]
                        terms.append(contrastive_loss(emb_t[i], emb_a[i], negatives, cfg))
                    contrast = torch.stack(terms).mean()
                else:
                    contrast = flow.new_zeros(())
                total = sim + cfg.alpha * smooth + cfg.beta * contrast

                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                w = len(batch) / len(volumes)
                for key, value in (("total", total), ("similarity", sim),
                                   ("smoothness", smooth), ("contrastive", contrast)):
                    sums[key] += float(value.detach()) * w
            history.append(sums)

        net.eval()
        self.network_ = net
        self.atlas_ = atlas
        self.history_ = history
        return self

    # -- inference -----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise RuntimeError("this augmenter is not fitted yet")

    def register(self, volume: Volume) -> Tuple[DisplacementField, np.ndarray, np.ndarray]:
        """Predict the atlas-to-volume field; returns (field, H_target, H_atlas)."""
        self._check_fitted()
        check_same_shape(volume.shape, self.atlas_.image.shape, "volume and atlas")
        atl = torch.as_tensor(self.atlas_.image.data, dtype=torch.float32)[None, None]
        tgt = torch.as_tensor(volume.data, dtype=torch.float32)[None, None]
        with torch.no_grad():
            flow, emb_a, emb_t = self.network_(atl, tgt)
        return (
            DisplacementField(flow[0].numpy().astype(np.float64)),
            emb_t[0].numpy(),
            emb_a[0].numpy(),
        )

    def transform(self, volumes: Sequence[Volume],
                  ids: Optional[Sequence] = None) -> List[SyntheticPair]:
        """Warp the atlas image and labels onto each volume."""
        self._check_fitted()
        if ids is None:
            ids = list(range(len(volumes)))
        if len(ids) != len(volumes):
            raise ValueError("ids must align with volumes")
        pairs = []
        for vid, volume in zip(ids, volumes):
            field, _, _ = self.register(volume)
            atl32 = torch.as_tensor(self.atlas_.image.data, dtype=torch.float32)
            flow32 = torch.as_tensor(field.data, dtype=torch.float32)
            warped = warp_tensor(atl32[None, None], flow32[None])[0, 0].numpy()
            image = Volume(np.clip(warped.astype(np.float64), 0.0, 1.0),
                           spacing=volume.spacing)
            labels = warp_labels(self.atlas_.labels, field)
            pairs.append(SyntheticPair(image=image, labels=labels, source_id=vid))
        return pairs

    def warp_atlas_labels(self, volume: Volume) -> LabelMap:
        """Atlas-propagation baseline: push atlas labels through the predicted field."""
        field, _, _ = self.register(volume)
        return warp_labels(self.atlas_.labels, field)

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        self._check_fitted()
        config = {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in self.get_params().items()}
        save_checkpoint(path, kind="registration", config=config,
                        state=self.network_.state_dict(),
                        epoch=len(self.history_), history=self.history_)

    @classmethod
    def from_checkpoint(cls, path, atlas: AtlasPair) -> "RegistrationAugmenter":
        payload = load_checkpoint(path, expected_kind="registration")
        est = cls(**payload["config"])
        net = RegistrationNetwork(est._net_config())
        net.load_state_dict(payload["state"])
        net.eval()
        est.network_ = net
        est.atlas_ = atlas
        est.history_ = payload["history"]
        return est
