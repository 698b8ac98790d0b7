from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

NO_FINDING = 14
NO_FINDING_NAME = "No finding"

# VinDr-CXR local labels, indexed by class_id.
VINDR_CLASS_NAMES = (
    "Aortic enlargement",
    "Atelectasis",
    "Calcification",
    "Cardiomegaly",
    "Consolidation",
    "ILD",
    "Infiltration",
    "Lung Opacity",
    "Nodule/Mass",
    "Other lesion",
    "Pleural effusion",
    "Pleural thickening",
    "Pneumothorax",
    "Pulmonary fibrosis",
    NO_FINDING_NAME,
)


@dataclass(frozen=True)
class AnnotationBox:
    """One radiologist box in original-image pixel coordinates.

    The no-finding sentinel (``class_id == 14``) carries no coordinates.
    """

    class_id: int
    x_min: float | None = None
    y_min: float | None = None
    x_max: float | None = None
    y_max: float | None = None
    rad_id: str = ""
    class_name: str = ""

    def __post_init__(self):
        if not 0 <= self.class_id <= NO_FINDING:
            raise ValueError(f"class_id {self.class_id} outside 0..{NO_FINDING}")
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if self.is_finding:
            if any(c is None for c in coords):
                raise ValueError(f"finding box of class {self.class_id} is missing coordinates")
            if not (self.x_min < self.x_max and self.y_min < self.y_max):
                raise ValueError(f"degenerate box {coords}")
        elif any(c is not None for c in coords):
            raise ValueError("no-finding sentinel must not carry coordinates")

    @property
    def is_finding(self) -> bool:
        return self.class_id != NO_FINDING

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)  # type: ignore[return-value]


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray
    original_size: tuple[int, int]  # (width, height)
    boxes: tuple[AnnotationBox, ...] = ()
    source: Literal["real", "synthetic"] = "real"

    @property
    def is_positive(self) -> bool:
        return any(b.is_finding for b in self.boxes)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(sorted({b.class_id for b in self.boxes if b.is_finding}))

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PairSample:
    image_a: ImageRecord
    image_b: ImageRecord
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.label}")
        pos = self.image_a.is_positive + self.image_b.is_positive
        if self.label == 1 and pos != 2:
            raise ValueError("label-1 pair must contain two positive scans")
        if self.label == 0 and pos != 1:
            raise ValueError("label-0 pair must contain exactly one positive scan")


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 200
    image_size: int = 64
    n_classes: int = 5
    held_out_class: int = 4
    anomalies_per_image: tuple[int, int] = (0, 2)
    box_size: tuple[int, int] = (10, 20)
    texture_seed: int = 0
    unet_depth: int = 4
    # Each scan is assigned this fraction of positives; the rest get zero anomalies.
    # ``None`` draws the anomaly count from ``anomalies_per_image`` directly.
    positive_fraction: float | None = 0.5
    class_names: tuple[str, ...] = field(default=())

    def validate(self) -> None:
        from ..errors import ConfigError

        if self.n_images <= 0:
            raise ConfigError("n_images must be positive")
        if not 0 <= self.held_out_class < self.n_classes:
            raise ConfigError(
                f"held_out_class {self.held_out_class} must be in [0, n_classes={self.n_classes})"
            )
        if self.n_classes > NO_FINDING:
            raise ConfigError(f"at most {NO_FINDING} synthetic classes are supported")
        if self.image_size % (2**self.unet_depth):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2**{self.unet_depth}"
            )
        lo, hi = self.anomalies_per_image
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad anomalies_per_image range {self.anomalies_per_image}")
        bmin, bmax = self.box_size
        if bmin < 2 or bmax < bmin:
            raise ConfigError(f"bad box_size range {self.box_size}")
        if bmax > self.image_size:
            raise ConfigError(
                f"box_size max {bmax} exceeds image_size {self.image_size}"
            )
        if self.positive_fraction is not None and not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
