"""Rectangularizing transform, focal segmentation loss and Siamese contrastive loss.

All functions accept numpy arrays or torch tensors and return torch tensors, so
they serve both as training objectives (autograd) and as plain evaluators.
Maps may be 2-D ``(H, W)`` or batched with the spatial axes last.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import torch

Sharpness = Union[float, Literal["exact"]]


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class ContrastiveParams:
    margin: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")


def _tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.as_tensor(x)
    if dtype is not None:
        return t.to(dtype)
    return t if t.is_floating_point() else t.to(torch.float64)


def _clipped_pnorm(x: torch.Tensor, dim: int, p: float) -> torch.Tensor:
    """min(1, ||x||_p) along ``dim`` for non-negative x; zero where the slice is all zero.

    Computed as ``m * ||x / m||_p`` with ``m`` the slice maximum so large p stays
    representable in float32.
    """
    m = x.amax(dim=dim, keepdim=True)
    nonzero = m > 0
    m_safe = torch.where(nonzero, m, torch.ones_like(m))
    s = ((x / m_safe) ** p).sum(dim=dim, keepdim=True)
    norm = torch.where(nonzero, m_safe * s ** (1.0 / p), torch.zeros_like(m))
    return norm.clamp(max=1.0).squeeze(dim)


def rect_transform(pred, sharpness: Sharpness = 8.0) -> torch.Tensor:
    """Map a probability map toward its rectangular envelope.

    ``out[i, j] = row_agg[i] * col_agg[j]``. With ``sharpness="exact"`` the
    aggregate is the row/column maximum, which reproduces a single filled
    rectangle exactly and fills a blob out to its bounding box. A finite
    sharpness ``p >= 1`` uses the p-norm clipped to 1, a differentiable upper
    bound on the maximum that still maps a 0/1 rectangle onto itself and
    converges to the exact mode as ``p`` grows.

    Several separated blobs also light up the crossings of their rows and
    columns; that is inherent to the separable form.
    """
    x = _tensor(pred)
    if x.ndim < 2:
        raise ValueError("rect_transform needs at least a 2-D map")
    if not torch.isfinite(x).all():
        raise ValueError("rect_transform input contains non-finite values")
    x = x.clamp(0.0, 1.0)
    if sharpness == "exact":
        rows = x.amax(dim=-1)
        cols = x.amax(dim=-2)
    else:
        p = float(sharpness)
        if p < 1:
            raise ValueError(f"sharpness must be >= 1 or 'exact', got {sharpness}")
        rows = _clipped_pnorm(x, -1, p)
        cols = _clipped_pnorm(x, -2, p)
    return rows.unsqueeze(-1) * cols.unsqueeze(-2)


def focal_loss(target, pred, params: FocalParams = FocalParams(), reduction: str = "mean") -> torch.Tensor:
    """Sigmoid focal cross-entropy on probabilities, averaged over every pixel.

    ``-y a (1-p)^g ln p - (1-y) (1-a) p^g ln(1-p)`` with ``p`` clamped to
    ``[eps, 1-eps]``.
    """
    p = _tensor(pred)
    y = _tensor(target, p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: target {tuple(y.shape)} vs pred {tuple(p.shape)}")
    eps = params.epsilon
    p = p.clamp(eps, 1.0 - eps)
    a, g = params.alpha, params.gamma
    pos = -y * a * (1.0 - p) ** g * torch.log(p)
    neg = -(1.0 - y) * (1.0 - a) * p**g * torch.log1p(-p)
    loss = pos + neg
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    if reduction == "per_image":
        return loss.flatten(start_dim=-2).mean(dim=-1)
    raise ValueError(f"unknown reduction {reduction!r}")


def rect_focal_loss(
    target, pred, params: FocalParams = FocalParams(), sharpness: Sharpness = 8.0, reduction: str = "mean"
) -> torch.Tensor:
    return focal_loss(target, rect_transform(pred, sharpness), params, reduction)


def _safe_sqrt(sq: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (not NaN) gradient at the origin
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def euclidean_distance(a, b) -> torch.Tensor:
    """Distance along the last axis; batched inputs give one distance per row."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _safe_sqrt(((a - b) ** 2).sum(dim=-1))


def contrastive_loss(a, b, label, params: ContrastiveParams = ContrastiveParams(), reduction: str = "mean") -> torch.Tensor:
    """``0.5 y D^2 + 0.5 (1-y) max(0, margin - D)^2``; label 1 means similar."""
    a, b = _tensor(a), _tensor(b)
    y = _tensor(label, a.dtype)
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("contrastive labels must be 0 or 1")
    if params.normalize:
        a = torch.nn.functional.normalize(a, dim=-1)
        b = torch.nn.functional.normalize(b, dim=-1)
    sq = ((a - b) ** 2).sum(dim=-1)
    d = _safe_sqrt(sq)
    loss = 0.5 * y * sq + 0.5 * (1.0 - y) * torch.clamp(params.margin - d, min=0.0) ** 2
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")
