from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 64
    depth: int = 4
    base_filters: int = 16
    attention: bool = False
    in_channels: int = 1
    # Extra channels concatenated onto the bottleneck features (transfer fusion).
    bottleneck_channels: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("U-Net depth must be >= 1")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be >= 1")
        if self.input_size <= 0 or self.input_size % (2**self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2**self.depth}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    """Two 3x3 conv + BN + ReLU layers."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )


class AttentionGate(nn.Module):
    """Additive attention gate: skip features scaled by coefficients in [0, 1].

    The gating signal comes from the decoder path at the same resolution.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int):
        super().__init__()
        self.theta = nn.Conv2d(skip_channels, inter_channels, 1, bias=False)
        self.phi = nn.Conv2d(gate_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)
        self.last_coefficients: torch.Tensor | None = None

    def forward(self, skip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        attn = torch.sigmoid(self.psi(F.relu(self.theta(skip) + self.phi(gate))))
        self.last_coefficients = attn.detach()
        return skip * attn


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_filters * 2**i for i in range(config.depth + 1)]

        self.encoders = nn.ModuleList()
        c = config.in_channels
        for w in widths[:-1]:
            self.encoders.append(ConvBlock(c, w))
            c = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(c + config.bottleneck_channels, widths[-1])

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.gates = nn.ModuleList()
        for w_skip, w_deep in zip(reversed(widths[:-1]), reversed(widths[1:])):
            self.upsamplers.append(nn.ConvTranspose2d(w_deep, w_skip, 2, stride=2))
            if config.attention:
                self.gates.append(AttentionGate(w_skip, w_skip, max(w_skip // 2, 1)))
            self.decoders.append(ConvBlock(2 * w_skip, w_skip))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward_logits(self, x: torch.Tensor, bottleneck_extra: torch.Tensor | None = None) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        if self.config.bottleneck_channels:
            if bottleneck_extra is None:
                raise ValueError("this U-Net expects bottleneck features")
            x = torch.cat([x, bottleneck_extra], dim=1)
        x = self.bottleneck(x)
        for i, (up, dec) in enumerate(zip(self.upsamplers, self.decoders)):
            x = up(x)
            skip = skips[-(i + 1)]
            if self.config.attention:
                skip = self.gates[i](skip, x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor, bottleneck_extra: torch.Tensor | None = None) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x, bottleneck_extra))
