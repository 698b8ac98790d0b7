"""Frozen Siamese branch fused into a segmentation U-Net."""
from __future__ import annotations

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from .siamese import SiameseConfig, SiameseNet
from .unet import UNet, UNetConfig


class CheXNomaly(nn.Module):
    """Segmentation network with a frozen Siamese branch as feature extractor.

    ``full_map``: the branch's map is resized to the input resolution and stacked
    with the image as a second input channel. ``compact_embedding``: the
    embedding is projected to ``(S / 2**depth)**2`` values, reshaped to one
    bottleneck-sized tile and concatenated onto the bottleneck features.
    """

    def __init__(self, siamese_config: SiameseConfig, unet_config: UNetConfig, branch: nn.Module | None = None):
        super().__init__()
        self.siamese_config = siamese_config
        self.variant = siamese_config.variant
        self.extractor = copy.deepcopy(branch) if branch is not None else SiameseNet(siamese_config).branch
        for p in self.extractor.parameters():
            p.requires_grad_(False)
        self.extractor.eval()

        if self.variant == "full_map":
            cfg = UNetConfig(unet_config.input_size, unet_config.depth, unet_config.base_filters,
                             unet_config.attention, in_channels=2)
            self.project = None
        else:
            cfg = UNetConfig(unet_config.input_size, unet_config.depth, unet_config.base_filters,
                             unet_config.attention, in_channels=1, bottleneck_channels=1)
            tile = unet_config.input_size // 2**unet_config.depth
            self.project = nn.Linear(siamese_config.embed_dim, tile * tile)
        self.unet_config = cfg
        self.unet = UNet(cfg)

    def train(self, mode: bool = True):
        super().train(mode)
        self.extractor.eval()  # frozen: BN running stats must not move either
        return self

    def frozen_parameter_names(self) -> tuple[str, ...]:
        return tuple(f"extractor.{n}" for n, _ in self.extractor.named_parameters()) + tuple(
            f"extractor.{n}" for n, _ in self.extractor.named_buffers()
        )

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        s = self.siamese_config.input_size
        with torch.no_grad():
            xs = x if x.shape[-1] == s else F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False)
            feat = self.extractor(xs)
            if self.variant != "full_map":
                return feat
            feat = feat.view(x.shape[0], 1, s, s)
            if s != x.shape[-1]:
                feat = F.interpolate(feat, size=x.shape[-2:], mode="bilinear", align_corners=False)
            return feat

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.extract(x)
        if self.variant == "full_map":
            return self.unet(torch.cat([x, feat], dim=1))
        tile = self.unet_config.input_size // 2**self.unet_config.depth
        extra = self.project(feat).view(x.shape[0], 1, tile, tile)
        return self.unet(x, bottleneck_extra=extra)
