"""Network architectures: the deformation-field generator and the residual U-Net.

The registration network runs one weight-shared encoder over the atlas and the
target, fuses the two feature pyramids in a skip-connected decoder, and emits a
3-channel voxel-unit displacement field plus one pooled embedding per input.

The teacher/student networks share a residual U-Net trunk (convolution, PReLU,
layer normalization per block) and differ only in the output head: a C-channel
segmentation head or a single-channel reconstruction head. Their forward pass
also returns the stack of output-path features, ordered head-first, for the
hint loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import ConfigurationError, check_divisible


@dataclass
class RegNetConfig:
    encoder_channels: Sequence[int] = (16, 32, 32, 32)
    decoder_channels: Sequence[int] = (32, 32, 32, 16)
    embedding_dim: int = 64

    @property
    def num_stages(self) -> int:
        return len(self.encoder_channels)

    def validate(self) -> "RegNetConfig":
        if len(self.encoder_channels) < 2:
            raise ConfigurationError("encoder needs at least 2 stages")
        if len(self.decoder_channels) != len(self.encoder_channels):
            raise ConfigurationError(
                "decoder_channels must list one width per encoder stage"
            )
        if self.embedding_dim < 1:
            raise ConfigurationError("embedding_dim must be positive")
        return self


class RegistrationNetwork(nn.Module):
    """Two-input encoder/decoder producing a dense displacement field."""

    def __init__(self, cfg: RegNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc, dec = list(cfg.encoder_channels), list(cfg.decoder_channels)

        stages = []
        prev = 1
        for c in enc:
            stages.append(nn.Conv3d(prev, c, 3, stride=2, padding=1))
            prev = c
        self.encoder = nn.ModuleList(stages)
        self.project = nn.Linear(enc[-1], cfg.embedding_dim)

        ups = []
        prev = 2 * enc[-1]
        for i, c in enumerate(dec):
            skip = 2 * enc[-2 - i] if i < len(dec) - 1 else 2  # raw pair at full res
            ups.append(nn.Conv3d(prev + skip, c, 3, padding=1))
            prev = c
        self.decoder = nn.ModuleList(ups)

        self.flow = nn.Conv3d(dec[-1], 3, 3, padding=1)
        # near-zero initial field so training starts from ~identity
        nn.init.normal_(self.flow.weight, std=1e-5)
        nn.init.zeros_(self.flow.bias)

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for stage in self.encoder:
            x = F.leaky_relu(stage(x), 0.2)
            feats.append(x)
        return feats

    def embed(self, bottleneck: torch.Tensor) -> torch.Tensor:
        return self.project(bottleneck.mean(dim=(2, 3, 4)))

    def forward(self, atlas: torch.Tensor, target: torch.Tensor
                ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (field (B,3,D,H,W), atlas embedding, target embedding)."""
        if atlas.shape != target.shape:
            raise ValueError(
                f"atlas shape {tuple(atlas.shape)} != target shape {tuple(target.shape)}"
            )
        check_divisible(atlas.shape[2:], 2 ** self.cfg.num_stages)
        fa = self.encode(atlas)
        ft = self.encode(target)
        emb_a = self.embed(fa[-1])
        emb_t = self.embed(ft[-1])

        x = torch.cat([fa[-1], ft[-1]], dim=1)
        n = len(self.decoder)
        for i, conv in enumerate(self.decoder):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if i < n - 1:
                skip = torch.cat([fa[n - 2 - i], ft[n - 2 - i]], dim=1)
            else:
                skip = torch.cat([atlas, target], dim=1)
            x = F.leaky_relu(conv(torch.cat([x, skip], dim=1)), 0.2)
        return self.flow(x), emb_a, emb_t


@dataclass
class UNetConfig:
    stage_widths: Sequence[int] = (16, 32, 64)
    head: str = "seg"                   # seg | rec
    num_classes: Optional[int] = None   # required for the seg head

    @property
    def depth(self) -> int:
        return len(self.stage_widths)

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths) - 1

    def validate(self) -> "UNetConfig":
        if len(self.stage_widths) < 2:
            raise ConfigurationError("need at least 2 stage widths")
        if self.head not in ("seg", "rec"):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.head == "seg" and (self.num_classes is None or self.num_classes < 2):
            raise ConfigurationError("seg head requires num_classes >= 2")
        return self


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.act1 = nn.PReLU()
        self.norm1 = nn.GroupNorm(1, out_ch)   # layer norm over (C, D, H, W)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.act2 = nn.PReLU()
        self.norm2 = nn.GroupNorm(1, out_ch)
        self.shortcut = (
            nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        )

    def forward(self, x):
        y = self.norm1(self.act1(self.conv1(x)))
        y = self.norm2(self.act2(self.conv2(y)))
        return y + self.shortcut(x)


class ResidualUNet(nn.Module):
    """Residual U-Net with a segmentation or reconstruction head.

    forward returns (head output, output-path features closest-to-head first);
    the feature stack has one entry per stage width.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = list(cfg.stage_widths)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = 1
        for i, width in enumerate(w):
            self.enc_blocks.append(ResidualBlock(prev, width))
            if i < len(w) - 1:
                self.downs.append(nn.Conv3d(width, width, 3, stride=2, padding=1))
            prev = width

        self.dec_blocks = nn.ModuleList(
            ResidualBlock(w[i + 1] + w[i], w[i]) for i in range(len(w) - 1)
        )
        out_ch = cfg.num_classes if cfg.head == "seg" else 1
        self.head = nn.Conv3d(w[0], out_ch, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        check_divisible(x.shape[2:], 2 ** self.cfg.num_stages)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            x = block(x)
            if i < len(self.downs):
                skips.append(x)
                x = self.downs[i](x)

        feats = [x]  # bottleneck, will end up deepest in the stack
        for i in range(len(self.dec_blocks) - 1, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = self.dec_blocks[i](torch.cat([x, skips[i]], dim=1))
            feats.append(x)
        feats.reverse()  # index 0 = closest to the head
        return self.head(x), feats
