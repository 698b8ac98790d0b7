"""Scan ingestion: DICOM and PNG to normalized square grayscale arrays."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..errors import IngestionError
from .types import AnnotationBox, ImageRecord

log = logging.getLogger(__name__)


def minmax_normalize(arr: np.ndarray, image_id: str = "") -> np.ndarray:
    arr = arr.astype(np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        log.warning("constant-valued scan %s normalized to zeros", image_id or "<unnamed>")
        return np.zeros(arr.shape, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def resize_bilinear(arr: np.ndarray, target_size: int) -> np.ndarray:
    if arr.shape == (target_size, target_size):
        return arr.astype(np.float32)
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    out = np.asarray(img.resize((target_size, target_size), Image.Resampling.BILINEAR))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def dicom_to_array(path: str | Path) -> np.ndarray:
    """Read a single-frame grayscale DICOM into modality values, brighter = higher."""
    import pydicom

    try:
        ds = pydicom.dcmread(str(path))
        raw = ds.pixel_array
    except Exception as exc:  # pydicom raises a zoo of types for bad files
        raise IngestionError(f"{path}: unreadable DICOM ({exc})") from exc

    frames = int(getattr(ds, "NumberOfFrames", 1) or 1)
    if frames > 1 or raw.ndim != 2:
        raise IngestionError(f"{path}: expected single-frame 2-D image, got shape {raw.shape}")
    if int(getattr(ds, "SamplesPerPixel", 1)) != 1:
        raise IngestionError(f"{path}: color images are not supported")
    photometric = str(getattr(ds, "PhotometricInterpretation", "MONOCHROME2")).strip()
    if photometric not in ("MONOCHROME1", "MONOCHROME2"):
        raise IngestionError(f"{path}: unsupported photometric interpretation {photometric}")

    arr = raw.astype(np.float64)
    arr = arr * float(getattr(ds, "RescaleSlope", 1) or 1) + float(getattr(ds, "RescaleIntercept", 0) or 0)
    if photometric == "MONOCHROME1":
        arr = arr.max() + arr.min() - arr
    return arr


def load_and_normalize_scan(
    dicom_file: str | Path,
    target_size: int = 512,
    boxes: Sequence[AnnotationBox] = (),
    image_id: str | None = None,
) -> ImageRecord:
    path = Path(dicom_file)
    arr = dicom_to_array(path)
    image_id = image_id or path.stem
    height, width = arr.shape
    pixels = resize_bilinear(minmax_normalize(arr, image_id), target_size)
    return ImageRecord(image_id, pixels, (width, height), tuple(boxes), source="real")


def load_png_record(
    png_file: str | Path,
    target_size: int | None = None,
    boxes: Sequence[AnnotationBox] = (),
    image_id: str | None = None,
    original_size: tuple[int, int] | None = None,
    source: str = "synthetic",
) -> ImageRecord:
    path = Path(png_file)
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "I;16", "I"):
                raise IngestionError(f"{path}: expected grayscale PNG, got mode {img.mode}")
            raw = np.asarray(img)
    except OSError as exc:
        raise IngestionError(f"{path}: unreadable PNG ({exc})") from exc
    scale = 255.0 if raw.dtype == np.uint8 else float(np.iinfo(raw.dtype).max if raw.dtype.kind in "ui" else 1.0)
    pixels = (raw.astype(np.float32) / scale).astype(np.float32)
    height, width = pixels.shape
    if target_size is not None and pixels.shape != (target_size, target_size):
        pixels = resize_bilinear(pixels, target_size)
    return ImageRecord(
        image_id or path.stem,
        pixels,
        original_size or (width, height),
        tuple(boxes),
        source=source,  # type: ignore[arg-type]
    )


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(pixels), mode="L").save(path, optimize=False)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, optimize=False)


def load_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)
