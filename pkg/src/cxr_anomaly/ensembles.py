"""Consolidating the outputs of per-class specialized models into one mask.

Two schemes: a pixelwise maximum (no parameters) and a small learned fusion
network trained on stacks of specialized predictions.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DataError
from .models.handle import ModelHandle, build_fusion
from .models.training import SegLossConfig, TrainConfig, train_segmentation

log = logging.getLogger(__name__)


def as_stack(maps, dtype=np.float32) -> np.ndarray:
    """Validate a mask stack and return it as a (K, H, W) array (``dtype=None`` keeps the input type)."""
    if isinstance(maps, np.ndarray):
        if maps.ndim != 3:
            raise ValueError(f"a stack array must be (K, H, W), got shape {maps.shape}")
        arrs = list(maps)
    else:
        arrs = [np.asarray(m) for m in maps]
    if not arrs:
        raise ValueError("mask stack is empty")
    shape = arrs[0].shape
    if len(shape) != 2:
        raise ValueError(f"stack members must be 2-D maps, got shape {shape}")
    for k, m in enumerate(arrs):
        if m.shape != shape:
            raise ValueError(f"stack member {k} has shape {m.shape}, expected {shape}")
    stack = np.stack(arrs)
    return stack if dtype is None else stack.astype(dtype, copy=False)


def max_ensemble(maps) -> np.ndarray:
    """Pixelwise maximum over the K maps of a stack."""
    return as_stack(maps, dtype=None).max(axis=0)


def _check_k(stacks: Sequence[np.ndarray]) -> int:
    ks = {s.shape[0] for s in stacks}
    if len(ks) != 1:
        raise DataError(f"inconsistent stack depth across samples: {sorted(ks)}")
    return ks.pop()


def train_model_ensemble(
    stacks: Sequence[tuple],
    tc: TrainConfig = TrainConfig(),
    loss: SegLossConfig = SegLossConfig(sharpness=8.0),
    val_stacks: Sequence[tuple] | None = None,
    width: int = 16,
) -> ModelHandle:
    """Fit a fusion network on ``(stack, target_mask)`` samples.

    The default objective is the rectangularized focal loss. Every stack must
    have the same number of channels K; the handle records K
    so later applications can be checked.
    """
    if not stacks:
        raise DataError("no stacks to train the fusion network on")
    data = [(as_stack(s), np.asarray(t)) for s, t in stacks]
    k = _check_k([s for s, _ in data])
    val = None
    if val_stacks:
        val = [(as_stack(s), np.asarray(t)) for s, t in val_stacks]
        if _check_k([s for s, _ in val]) != k:
            raise DataError("validation stacks have a different depth than training stacks")
    handle = build_fusion(k, width, seed=tc.seed)
    handle, _ = train_segmentation(handle, data, loss, tc, val)
    return handle


def apply_model_ensemble(model: ModelHandle, maps) -> np.ndarray:
    stack = as_stack(maps)
    expected = model.config["n_inputs"]
    if stack.shape[0] != expected:
        raise DataError(f"fusion network expects {expected} maps, got {stack.shape[0]}")
    model.module.eval()
    with torch.no_grad():
        out = model.module(torch.from_numpy(np.ascontiguousarray(stack))[None])
    return out[0, 0].numpy()


def save_stacks(path: str | Path, stacks: dict[str, np.ndarray]) -> Path:
    """Write ``image_id -> (K, H, W)`` stacks to one compressed NPZ archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: as_stack(v) for k, v in stacks.items()}
    if arrays:
        _check_k(list(arrays.values()))
    np.savez_compressed(path, **arrays)
    return path


def load_stacks(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"stack archive {path} not found")
    with np.load(path) as npz:
        return {k: npz[k] for k in sorted(npz.files)}
