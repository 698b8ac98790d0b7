"""Dataset partitioning: train/val/test splits, balanced specialist subsets, Siamese pairs."""
from __future__ import annotations

import math
from typing import Hashable, Sequence, TypeVar

import numpy as np

from ..errors import ConfigError, DataError
from .annotations import rasterize_mask
from .types import ImageRecord, PairSample

T = TypeVar("T", bound=Hashable)


def make_splits(
    image_ids: Sequence[T], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[T], list[T], list[T]]:
    """Seeded disjoint partition into (train, val, test).

    Val and test sizes are ``floor(n * ratio)``; whatever remains goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    if len(set(image_ids)) != len(image_ids):
        raise DataError("image_ids contain duplicates")

    n = len(image_ids)
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [image_ids[i] for i in order]
    val = shuffled[:n_val]
    test = shuffled[n_val : n_val + n_test]
    train = shuffled[n_val + n_test :]
    return train, val, test


def class_mask(record: ImageRecord, class_id: int | None = None) -> np.ndarray:
    """Rasterized mask of ``record`` keeping only ``class_id`` boxes (all findings if None)."""
    boxes = [b for b in record.boxes if b.is_finding and (class_id is None or b.class_id == class_id)]
    return rasterize_mask(boxes, record.original_size, record.size)


def make_balanced_subset(
    records: Sequence[ImageRecord], class_id: int, seed: int = 0
) -> list[tuple[ImageRecord, np.ndarray]]:
    """50/50 subset for one specialized model.

    Positives keep only their ``class_id`` boxes; negatives (any scan without that
    class, including scans with other findings) get all-zero masks. When one side
    is short, the other is downsampled to match.
    """
    if not 0 <= class_id <= 13:
        raise ConfigError(f"class_id {class_id} outside 0..13")
    positives = [r for r in records if class_id in r.class_ids]
    negatives = [r for r in records if class_id not in r.class_ids]
    if not positives:
        raise DataError(f"no positive scans for class {class_id}; cannot train a specialized model")
    if not negatives:
        raise DataError(f"no negative scans available to balance class {class_id}")

    rng = np.random.default_rng(seed)
    n = min(len(positives), len(negatives))
    pos_idx = np.sort(rng.choice(len(positives), size=n, replace=False))
    neg_idx = np.sort(rng.choice(len(negatives), size=n, replace=False))
    out = [(positives[i], class_mask(positives[i], class_id)) for i in pos_idx]
    out += [(negatives[i], np.zeros((negatives[i].size,) * 2, dtype=np.uint8)) for i in neg_idx]
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def pair_label(a: ImageRecord, b: ImageRecord) -> int:
    """1 for (P,P), 0 for (P,N)/(N,P); (N,N) has no class."""
    pos = a.is_positive + b.is_positive
    if pos == 0:
        raise DataError("(N,N) pairs have no label")
    return 1 if pos == 2 else 0


def make_pairs(records: Sequence[ImageRecord], n_pairs: int, seed: int = 0) -> list[PairSample]:
    positives = [r for r in records if r.is_positive]
    negatives = [r for r in records if not r.is_positive]
    if not positives or not negatives:
        raise DataError(
            f"pair generation needs positive and negative scans "
            f"(got {len(positives)} positive, {len(negatives)} negative)"
        )
    if n_pairs <= 0:
        raise ConfigError("n_pairs must be positive")

    rng = np.random.default_rng(seed)
    n_similar = n_pairs // 2
    labels = rng.permutation(np.array([1] * n_similar + [0] * (n_pairs - n_similar)))
    pairs = []
    for label in labels:
        if label == 1:
            replace = len(positives) < 2
            i, j = rng.choice(len(positives), size=2, replace=replace)
            pairs.append(PairSample(positives[i], positives[j], 1))
        else:
            p = positives[rng.integers(len(positives))]
            n = negatives[rng.integers(len(negatives))]
            a, b = (p, n) if rng.random() < 0.5 else (n, p)
            pairs.append(PairSample(a, b, 0))
    return pairs
