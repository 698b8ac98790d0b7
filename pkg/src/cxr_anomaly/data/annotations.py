"""Annotation CSV parsing/serialization and box rasterization."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from typing import Iterable, Sequence, TextIO

import numpy as np

from ..errors import DataError, ParseError
from .types import NO_FINDING, AnnotationBox

CSV_HEADER = ("image_id", "class_name", "class_id", "rad_id", "x_min", "y_min", "x_max", "y_max")


def _coord(raw: str, name: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"{name} is not numeric: {raw!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"{name} is not finite: {raw!r}", line)
    return value


def parse_annotations(stream: TextIO | str) -> list[tuple[str, AnnotationBox]]:
    """Parse a VinDr-CXR style annotation CSV.

    Rows keep file order within an image, and images appear in order of first
    occurrence, so rows for the same ``image_id`` come out grouped. Line numbers
    in errors are 1-based and count the header as line 1.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty annotation file", 1) from None
    header = [h.strip() for h in header]
    if tuple(header) != CSV_HEADER:
        raise ParseError(f"unexpected header {header}; expected {list(CSV_HEADER)}", 1)

    grouped: dict[str, list[AnnotationBox]] = defaultdict(list)
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line)
        image_id, class_name, class_id_raw, rad_id, *coords_raw = (c.strip() for c in row)
        if not image_id:
            raise ParseError("empty image_id", line)
        try:
            class_id = int(class_id_raw)
        except ValueError:
            raise ParseError(f"class_id is not an integer: {class_id_raw!r}", line) from None
        if not 0 <= class_id <= NO_FINDING:
            raise ParseError(f"class_id {class_id} outside 0..{NO_FINDING}", line)

        if class_id == NO_FINDING:
            box = AnnotationBox(class_id, rad_id=rad_id, class_name=class_name)
        else:
            names = CSV_HEADER[4:]
            missing = [n for n, c in zip(names, coords_raw) if c == ""]
            if missing:
                raise ParseError(f"finding row missing {', '.join(missing)}", line)
            x0, y0, x1, y1 = (_coord(c, n, line) for c, n in zip(coords_raw, names))
            try:
                box = AnnotationBox(class_id, x0, y0, x1, y1, rad_id=rad_id, class_name=class_name)
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
        grouped[image_id].append(box)

    return [(image_id, box) for image_id, boxes in grouped.items() for box in boxes]


def group_boxes(rows: Iterable[tuple[str, AnnotationBox]]) -> dict[str, list[AnnotationBox]]:
    out: dict[str, list[AnnotationBox]] = defaultdict(list)
    for image_id, box in rows:
        out[image_id].append(box)
    return dict(out)


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    # repr round-trips floats exactly; integral values print without ".0"
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def serialize_annotations(rows: Iterable[tuple[str, AnnotationBox]], stream: TextIO | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for image_id, box in rows:
        writer.writerow(
            [image_id, box.class_name, box.class_id, box.rad_id, *(_fmt(c) for c in box.coords)]
        )
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scale_box(
    box: AnnotationBox, original_size: tuple[int, int], target_size: int
) -> tuple[int, int, int, int]:
    """Scale a box to a ``target_size`` square grid; returns integer half-open bounds.

    Bounds are clipped to the grid. A box that rounds to zero width or height keeps
    one pixel so small findings never vanish.
    """
    width, height = original_size
    sx, sy = target_size / width, target_size / height
    x0 = _round_half_up(box.x_min * sx)
    y0 = _round_half_up(box.y_min * sy)
    x1 = _round_half_up(box.x_max * sx)
    y1 = _round_half_up(box.y_max * sy)
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, target_size), min(y1, target_size)
    if cx0 >= cx1 or cy0 >= cy1:
        raise DataError(
            f"box {box.coords} (class {box.class_id}, rad {box.rad_id}) lies outside the "
            f"{target_size}x{target_size} image after scaling"
        )
    return cx0, cy0, cx1, cy1


def rasterize_mask(
    boxes: Sequence[AnnotationBox], original_size: tuple[int, int], target_size: int
) -> np.ndarray:
    """Union of half-open rasterized boxes as a ``uint8`` {0,1} mask of shape (S, S)."""
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    mask = np.zeros((target_size, target_size), dtype=np.uint8)
    for box in boxes:
        if not box.is_finding:
            continue
        x0, y0, x1, y1 = scale_box(box, original_size, target_size)
        mask[y0:y1, x0:x1] = 1
    return mask
