from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from ..errors import ConfigError
from .unet import ConvBlock, UNet, UNetConfig

VARIANTS = ("compact_embedding", "full_map")
FUSIONS = ("absdiff", "concat")


@dataclass(frozen=True)
class SiameseConfig:
    variant: str = "full_map"
    embed_dim: int = 128
    input_size: int = 64
    bce_weight: float = 1.0
    contrastive_weight: float = 1.0
    fusion: str = "absdiff"
    depth: int = 4
    base_filters: int = 8

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown Siamese variant {self.variant!r}; expected one of {VARIANTS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown head fusion {self.fusion!r}; expected one of {FUSIONS}")
        if self.bce_weight < 0 or self.contrastive_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.variant == "compact_embedding" and self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        self.branch_unet_config().validate()

    def branch_unet_config(self) -> UNetConfig:
        return UNetConfig(self.input_size, self.depth, self.base_filters, attention=False)

    @property
    def embedding_length(self) -> int:
        return self.embed_dim if self.variant == "compact_embedding" else self.input_size**2

    def to_dict(self) -> dict:
        return asdict(self)


class CompactBranch(nn.Module):
    """Conv encoder, global max pool, dense projection to ``embed_dim`` units.

    Max pooling makes "some abnormal texture anywhere" a location-free feature,
    which is what the pair task compares.
    """

    def __init__(self, config: SiameseConfig):
        super().__init__()
        layers = []
        c = 1
        for level in range(config.depth):
            w = config.base_filters * 2**level
            layers += [ConvBlock(c, w), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveMaxPool2d(1)
        self.project = nn.Linear(c, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.pool(self.features(x)).flatten(1))


class MapBranch(nn.Module):
    """U-Net branch producing a full-resolution single-channel map in [0, 1]."""

    def __init__(self, config: SiameseConfig):
        super().__init__()
        self.unet = UNet(config.branch_unet_config())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.unet(x).flatten(1)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        return self.unet(x)


class DistanceHead(nn.Module):
    """``b - sum_i w_i^2 |d_i|``: a similarity logit that can only fall as the
    elementwise difference grows, so an identical pair always gets the highest
    score the head can produce.

    Weights start at ``1 / d`` so the initial logit is ``b - mean|d|`` and the
    sigmoid is not saturated for long map embeddings. The square (rather than a
    softplus of a log-scale parameter) lets Adam's roughly constant step size
    grow the overall scale by orders of magnitude within a few hundred steps.
    """

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.full((d,), d**-0.5) * (1 + 0.01 * torch.randn(d)))
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, absdiff: torch.Tensor) -> torch.Tensor:
        return self.bias - absdiff @ self.weight.square()


class SiameseNet(nn.Module):
    """Two weight-tied branches (one module applied twice) and a sigmoid head.

    ``absdiff`` fusion feeds ``|e_a - e_b|`` to a monotone distance head, which
    makes the score invariant to swapping the inputs; ``concat`` feeds
    ``[e_a, e_b]`` to a plain linear unit.
    """

    def __init__(self, config: SiameseConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.branch = CompactBranch(config) if config.variant == "compact_embedding" else MapBranch(config)
        d = config.embedding_length
        self.head = DistanceHead(d) if config.fusion == "absdiff" else nn.Linear(2 * d, 1)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.branch(x)

    def score_logits(self, emb_a: torch.Tensor, emb_b: torch.Tensor) -> torch.Tensor:
        if self.config.fusion == "absdiff":
            return self.head((emb_a - emb_b).abs())
        return self.head(torch.cat([emb_a, emb_b], 1)).squeeze(1)

    def forward(self, a: torch.Tensor, b: torch.Tensor):
        emb = self.embed(torch.cat([a, b], dim=0))
        emb_a, emb_b = emb[: a.shape[0]], emb[a.shape[0] :]
        return torch.sigmoid(self.score_logits(emb_a, emb_b)), emb_a, emb_b
