"""Seeded phantom scans: smooth chest-like background plus class-specific boxed textures.

Every anomaly class shares one trait (a hard-edged local texture that departs
from the smooth background) and differs in the texture itself. That is the
property the generalization experiments rely on: a held-out class is new in
appearance but still an abnormality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .annotations import rasterize_mask
from .types import AnnotationBox, ImageRecord, SyntheticSpec

AMPLITUDE = 0.28

PatternFn = Callable[[int, int, np.random.Generator], np.ndarray]


def _bright(h, w, rng):
    return np.full((h, w), 1.0)


def _dark(h, w, rng):
    return np.full((h, w), -1.0)


def _stripes(h, w, rng, angle=0.0, period=4.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi)
    t = xx * math.sin(angle) + yy * math.cos(angle)
    return np.sign(np.sin(2 * np.pi * t / period + phase) + 1e-9)


def _checker(h, w, rng, cell=3):
    yy, xx = np.mgrid[0:h, 0:w]
    oy, ox = rng.integers(0, cell, size=2)
    return np.where(((yy + oy) // cell + (xx + ox) // cell) % 2 == 0, 1.0, -1.0)


def _ring(h, w, rng, border=2):
    out = np.full((h, w), 0.25)
    out[:border, :] = out[-border:, :] = 1.0
    out[:, :border] = out[:, -border:] = 1.0
    return out


def _speckle(h, w, rng):
    return rng.choice([-1.0, 1.0], size=(h, w))


PATTERNS: dict[str, PatternFn] = {
    "bright_patch": _bright,
    "dark_patch": _dark,
    "horizontal_stripes": lambda h, w, rng: _stripes(h, w, rng, angle=0.0),
    "vertical_stripes": lambda h, w, rng: _stripes(h, w, rng, angle=math.pi / 2),
    "checkerboard": _checker,
    "ring": _ring,
    "diagonal_stripes": lambda h, w, rng: _stripes(h, w, rng, angle=math.pi / 4, period=5.0),
    "speckle": _speckle,
}
PATTERN_NAMES = tuple(PATTERNS)


def class_pattern(class_id: int) -> tuple[str, PatternFn]:
    if class_id < len(PATTERN_NAMES):
        name = PATTERN_NAMES[class_id]
        return name, PATTERNS[name]
    angle = (class_id * 0.61) % math.pi
    period = 3.0 + (class_id % 3)

    def fn(h, w, rng):
        return _stripes(h, w, rng, angle=angle, period=period)

    return f"oriented_stripes_{class_id}", fn


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth texture over a fixed two-lung silhouette."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    body = 0.55 + 0.05 * np.cos(np.pi * (xx - 0.5))
    lungs = np.zeros_like(body)
    for cx in (0.3, 0.7):
        r = ((xx - cx) / 0.17) ** 2 + ((yy - 0.5) / 0.32) ** 2
        lungs += np.clip(1.2 - r, 0, 1)
    img = body - 0.2 * lungs
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 12, mode="wrap")
    noise /= noise.std() + 1e-12
    img = img + 0.06 * noise
    fine = gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    img = img + 0.01 * fine / (fine.std() + 1e-12)
    return img


def _place_boxes(
    n: int, size: int, box_range: tuple[int, int], rng: np.random.Generator, max_tries: int = 50
) -> list[tuple[int, int, int, int]]:
    placed: list[tuple[int, int, int, int]] = []
    lo, hi = box_range
    for _ in range(n):
        for attempt in range(max_tries):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            cand = (x0, y0, x0 + w, y0 + h)
            clear = all(
                cand[2] + 1 <= p[0] or p[2] + 1 <= cand[0] or cand[3] + 1 <= p[1] or p[3] + 1 <= cand[1]
                for p in placed
            )
            if clear or attempt == max_tries - 1:
                placed.append(cand)
                break
    return placed


@dataclass
class SyntheticSample:
    record: ImageRecord
    mask: np.ndarray
    class_ids: tuple[int, ...]

    @property
    def image_id(self) -> str:
        return self.record.image_id


def _image_rng(seed: int, texture_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, texture_seed, index]))


def generate_image(spec: SyntheticSpec, seed: int, index: int) -> SyntheticSample:
    rng = _image_rng(seed, spec.texture_seed, index)
    size = spec.image_size
    lo, hi = spec.anomalies_per_image

    if spec.positive_fraction is None:
        count = int(rng.integers(lo, hi + 1))
    elif hi > 0 and rng.random() < spec.positive_fraction:
        count = int(rng.integers(max(lo, 1), hi + 1))
    else:
        count = 0
    class_id = int(rng.integers(spec.n_classes)) if count else None

    img = _background(size, rng)
    boxes: list[AnnotationBox] = []
    if class_id is not None:
        name, pattern = class_pattern(class_id)
        if spec.class_names:
            name = spec.class_names[class_id]
        for x0, y0, x1, y1 in _place_boxes(count, size, spec.box_size, rng):
            tex = pattern(y1 - y0, x1 - x0, rng)
            img[y0:y1, x0:x1] += AMPLITUDE * tex
            boxes.append(AnnotationBox(class_id, x0, y0, x1, y1, rad_id="SYN", class_name=name))
    else:
        boxes.append(AnnotationBox(14, rad_id="SYN", class_name="No finding"))

    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    record = ImageRecord(f"syn_{index:05d}", pixels, (size, size), tuple(boxes), source="synthetic")
    mask = rasterize_mask(boxes, (size, size), size)
    return SyntheticSample(record, mask, record.class_ids)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int = 0) -> list[SyntheticSample]:
    """Generate ``spec.n_images`` phantom scans; bit-identical for equal (spec, seed).

    Each positive scan carries anomalies of a single class. Use
    :func:`synthetic_splits` to keep the held-out class out of train/val.
    """
    spec.validate()
    return [generate_image(spec, seed, i) for i in range(spec.n_images)]


def synthetic_splits(
    samples: Sequence[SyntheticSample],
    held_out_class: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    unseen_ratio: tuple[int, int] = (4, 10),
) -> dict[str, list[str]]:
    """Split ids into train/val/test over seen-class and negative scans, plus "unseen".

    The unseen set holds every held-out-class scan plus test-split negatives, up to
    the positive:negative ``unseen_ratio``. Held-out scans never reach train/val/test.
    """
    from .splits import make_splits

    seen = [s.image_id for s in samples if held_out_class not in s.class_ids]
    held = [s.image_id for s in samples if held_out_class in s.class_ids]
    train, val, test = make_splits(seen, ratios, seed)
    by_id = {s.image_id: s for s in samples}
    test_negatives = [i for i in test if not by_id[i].record.is_positive]
    pos, neg = unseen_ratio
    n_neg = min(len(test_negatives), round(len(held) * neg / pos))
    return {"train": train, "val": val, "test": test, "unseen": held + test_negatives[:n_neg]}
