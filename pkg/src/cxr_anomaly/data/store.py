"""On-disk dataset layout shared by the real and synthetic paths.

::

    <dataset>/
      dataset.json        metadata: image_size, class names, held-out class
      annotations.csv     VinDr-CXR layout, coordinates in original pixels
      images/<id>.png     normalized 8-bit grayscale
      masks/<id>.png      {0, 255}
      splits.json         {"train": [...], "val": [...], "test": [...], "unseen": [...]}
      pairs.csv           optional: image_a,image_b,label
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import DataError
from .annotations import group_boxes, parse_annotations, serialize_annotations
from .scans import load_mask_png, load_png_record, save_mask_png, save_png
from .types import ImageRecord, PairSample

PAIR_HEADER = ("image_a", "image_b", "label")


@dataclass
class Dataset:
    root: Path | None
    records: dict[str, ImageRecord]
    masks: dict[str, np.ndarray]
    splits: dict[str, list[str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return int(self.meta.get("image_size") or next(iter(self.records.values())).size)

    def subset(self, split: str) -> list[ImageRecord]:
        if split not in self.splits:
            raise DataError(f"dataset has no split {split!r} (available: {sorted(self.splits)})")
        return [self.records[i] for i in self.splits[split]]

    def samples(self, split: str) -> list[tuple[ImageRecord, np.ndarray]]:
        return [(r, self.masks[r.image_id]) for r in self.subset(split)]

    def primary_class(self, image_id: str) -> int | None:
        ids = self.records[image_id].class_ids
        return ids[0] if ids else None


def write_split_manifest(splits: dict[str, list[str]], path: str | Path) -> None:
    Path(path).write_text(json.dumps(splits, indent=2) + "\n")


def write_pairs(pairs: Iterable[PairSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_HEADER)
        for p in pairs:
            writer.writerow([p.image_a.image_id, p.image_b.image_id, p.label])


def read_pairs(path: str | Path, records: dict[str, ImageRecord]) -> list[PairSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PAIR_HEADER:
            raise DataError(f"{path}: pair manifest header must be {','.join(PAIR_HEADER)}")
        return [PairSample(records[r["image_a"]], records[r["image_b"]], int(r["label"])) for r in reader]


def write_dataset(
    root: str | Path,
    records: Sequence[ImageRecord],
    masks: dict[str, np.ndarray],
    splits: dict[str, list[str]],
    meta: dict,
) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for rec in records:
        save_png(rec.pixels, root / "images" / f"{rec.image_id}.png")
        save_mask_png(masks[rec.image_id], root / "masks" / f"{rec.image_id}.png")
    rows = [(rec.image_id, box) for rec in records for box in rec.boxes]
    (root / "annotations.csv").write_text(serialize_annotations(rows))
    write_split_manifest(splits, root / "splits.json")
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: str | Path, require_masks: bool = True) -> Dataset:
    root = Path(root)
    if not (root / "dataset.json").exists():
        raise DataError(f"{root} is not a dataset directory (no dataset.json)")
    meta = json.loads((root / "dataset.json").read_text())
    with open(root / "annotations.csv", newline="") as fh:
        boxes = group_boxes(parse_annotations(fh))
    size = meta.get("image_size")
    source = meta.get("source", "synthetic")

    records: dict[str, ImageRecord] = {}
    masks: dict[str, np.ndarray] = {}
    missing: list[str] = []
    for image_id in sorted(boxes):
        orig = tuple(meta.get("original_sizes", {}).get(image_id, (size, size)))
        records[image_id] = load_png_record(
            root / "images" / f"{image_id}.png", size, boxes[image_id], image_id, orig, source
        )
        mask_path = root / "masks" / f"{image_id}.png"
        if mask_path.exists():
            masks[image_id] = load_mask_png(mask_path)
        else:
            missing.append(image_id)
    if missing and require_masks:
        raise DataError(f"missing ground-truth masks for: {', '.join(missing)}")

    splits = {}
    if (root / "splits.json").exists():
        splits = json.loads((root / "splits.json").read_text())
    return Dataset(root, records, masks, splits, meta)
