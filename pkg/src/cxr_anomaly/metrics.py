"""Per-image segmentation scores, per-image confusion categories and dataset reports."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

REPORT_SCHEMA_VERSION = 1
REFERENCE_PIXELS = 512 * 512


class ConfusionCategory(str, enum.Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


def _pair(gt, pred, binary: bool = True) -> tuple[np.ndarray, np.ndarray]:
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    if binary:
        return gt.astype(bool), pred.astype(bool)
    return gt.astype(np.float64), pred.astype(np.float64)


def pixel_mae(gt, pred) -> float:
    g, p = _pair(gt, pred, binary=False)
    return float(np.abs(g - p).mean())


def iou(gt, pred_mask) -> float:
    """Intersection over union; two empty masks score 1."""
    g, p = _pair(gt, pred_mask)
    union = np.count_nonzero(g | p)
    if union == 0:
        return 1.0
    return np.count_nonzero(g & p) / union


def pixel_f1(gt, pred_mask) -> float:
    """Dice coefficient; two empty masks score 1."""
    g, p = _pair(gt, pred_mask)
    denom = np.count_nonzero(g) + np.count_nonzero(p)
    if denom == 0:
        return 1.0
    return 2 * np.count_nonzero(g & p) / denom


def error_pct(gt, pred_mask) -> float:
    g, p = _pair(gt, pred_mask)
    return 100.0 * np.count_nonzero(g ^ p) / g.size


def scaled_tp_threshold(shape: tuple[int, ...], reference: int = 100) -> int:
    """The 100-of-512x512 pixel tolerance rescaled to another image area."""
    return max(1, round(reference * math.prod(shape) / REFERENCE_PIXELS))


def categorize(gt, pred_mask, tp_diff_threshold: int = 100, iou_threshold: float = 0.4) -> ConfusionCategory:
    g, p = _pair(gt, pred_mask)
    if not g.any():
        return ConfusionCategory.FP if p.any() else ConfusionCategory.TN
    if np.count_nonzero(g ^ p) < tp_diff_threshold:
        return ConfusionCategory.TP
    if not (g & p).any():
        return ConfusionCategory.FN
    return ConfusionCategory.TP if iou(g, p) >= iou_threshold else ConfusionCategory.FN


def detection_f1(counts: Mapping[str, int]) -> float:
    tp, fp, fn = (int(counts.get(k, 0)) for k in ("TP", "FP", "FN"))
    if min(tp, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def error_histogram(errors: Sequence[float], bucket_width: float = 0.5, outlier_threshold: float = 4.0) -> dict:
    """Fixed-width buckets ``[k*w, (k+1)*w)`` from 0 up to the largest error.

    Errors strictly above ``outlier_threshold`` percent count as outliers.
    """
    if bucket_width <= 0:
        raise ValueError(f"bucket_width must be positive, got {bucket_width}")
    errs = np.asarray(errors, dtype=np.float64)
    if errs.size and (errs.min() < 0 or errs.max() > 100):
        raise ValueError("error percentages must lie in [0, 100]")
    idx = np.floor(errs / bucket_width).astype(int) if errs.size else np.zeros(0, int)
    n_buckets = int(idx.max()) + 1 if errs.size else 0
    counts = np.bincount(idx, minlength=n_buckets)
    return {
        "bucket_width": bucket_width,
        "edges": [round(k * bucket_width, 12) for k in range(n_buckets + 1)],
        "counts": counts.tolist(),
        "outlier_threshold": outlier_threshold,
        "outliers": int(np.count_nonzero(errs > outlier_threshold)),
    }


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    # None rescales the 100-pixel rule to the evaluated image area.
    tp_diff_threshold: int | None = None
    iou_threshold: float = 0.4
    mae_on: str = "probability"
    bucket_width: float = 0.5
    outlier_threshold: float = 4.0
    rect_postprocess: bool = False

    def validate(self) -> None:
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.mae_on not in ("probability", "binary"):
            raise ConfigError("mae_on must be 'probability' or 'binary'")


@dataclass
class EvalReport:
    per_image: list[dict]
    aggregates: dict
    per_class: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    # aggregates restricted to each named evaluation set (e.g. base test vs unseen class)
    per_set: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["image_id", "class", "sets", "mae", "iou", "pixel_f1", "category", "error_pct"]
        writer = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(self.per_image)
        return buf.getvalue()

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(self.to_json())
        (directory / "report.csv").write_text(self.to_csv())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise DataError(f"unsupported report schema version {d.get('schema_version')}")
        return cls(d["per_image"], d["aggregates"], d.get("per_class", {}), d.get("metadata", {}), d.get("per_set", {}))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        return cls.from_dict(json.loads(path.read_text()))


def aggregate_rows(rows: Sequence[dict], bucket_width: float = 0.5, outlier_threshold: float = 4.0) -> dict:
    counts = {c.value: 0 for c in ConfusionCategory}
    for r in rows:
        counts[r["category"]] += 1
    positives = [r for r in rows if r["gt_positive"]]
    pos_counts = {c.value: 0 for c in ConfusionCategory}
    for r in positives:
        pos_counts[r["category"]] += 1
    n = len(rows)
    return {
        "n_images": n,
        "n_positive": len(positives),
        "mean_mae": float(np.mean([r["mae"] for r in rows])) if n else float("nan"),
        "mean_iou": float(np.mean([r["iou"] for r in rows])) if n else float("nan"),
        "mean_iou_positive": float(np.mean([r["iou"] for r in positives])) if positives else float("nan"),
        "mean_pixel_f1": float(np.mean([r["pixel_f1"] for r in rows])) if n else float("nan"),
        "confusion": counts,
        "detection_f1_all": detection_f1(counts),
        "detection_f1_positive": detection_f1(pos_counts),
        "histogram": error_histogram([r["error_pct"] for r in rows], bucket_width, outlier_threshold),
    }


def evaluate_predictions(
    gts: Mapping[str, np.ndarray],
    probs: Mapping[str, np.ndarray],
    classes: Mapping[str, str] | None = None,
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Score every image in ``gts`` against its prediction.

    ``probs`` may hold probability maps or binary masks; masks are obtained with
    ``config.threshold``. ``classes`` labels each image for the per-class block
    (``"none"`` for negatives).
    """
    config.validate()
    missing = sorted(set(gts) - set(probs))
    if missing:
        raise DataError(f"no prediction for: {', '.join(missing)}")
    rows = []
    for image_id in sorted(gts):
        gt = np.asarray(gts[image_id]).astype(np.uint8)
        prob = np.asarray(probs[image_id], dtype=np.float64)
        mask = (prob >= config.threshold).astype(np.uint8)
        tp_thr = config.tp_diff_threshold or scaled_tp_threshold(gt.shape)
        rows.append(
            {
                "image_id": image_id,
                "class": (classes or {}).get(image_id, "none" if not gt.any() else "all"),
                "gt_positive": bool(gt.any()),
                "mae": pixel_mae(gt, prob if config.mae_on == "probability" else mask),
                "iou": iou(gt, mask),
                "pixel_f1": pixel_f1(gt, mask),
                "category": categorize(gt, mask, tp_thr, config.iou_threshold).value,
                "error_pct": error_pct(gt, mask),
            }
        )
    per_class = {}
    for cls in sorted({r["class"] for r in rows}):
        per_class[cls] = aggregate_rows([r for r in rows if r["class"] == cls], config.bucket_width, config.outlier_threshold)
    return EvalReport(
        rows,
        aggregate_rows(rows, config.bucket_width, config.outlier_threshold),
        per_class,
        {"eval_config": asdict(config), "empty_mask_convention": "iou=f1=1 when gt and prediction are both empty"},
    )


def evaluate_sets(
    sets: Mapping[str, Sequence[str]],
    gts: Mapping[str, np.ndarray],
    probs: Mapping[str, np.ndarray],
    classes: Mapping[str, str] | None = None,
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Score the union of several image-id sets once, with per-set aggregates.

    An image listed in two sets (the shared negatives of the base and
    unseen-class sets) appears once in ``per_image`` and counts in both sets.
    """
    members: dict[str, list[str]] = {}
    for name in sorted(sets):
        for image_id in sets[name]:
            members.setdefault(image_id, []).append(name)
    report = evaluate_predictions({i: gts[i] for i in members}, probs, classes, config)
    for row in report.per_image:
        row["sets"] = ";".join(members[row["image_id"]])
    report.per_set = {
        name: aggregate_rows([r for r in report.per_image if name in members[r["image_id"]]],
                             config.bucket_width, config.outlier_threshold)
        for name in sorted(sets)
    }
    return report


def evaluate_dataset(source, samples, config: EvalConfig = EvalConfig(), classes: Mapping[str, str] | None = None) -> EvalReport:
    """Evaluate a model handle or a prediction directory on (record, mask) samples.

    A directory holds ``<image_id>.npy`` probability maps or ``<image_id>.png``
    binary masks.
    """
    from .data.scans import load_mask_png
    from .models.training import postprocess, predict_maps

    samples = list(samples)
    missing_gt = [r.image_id for r, m in samples if m is None]
    if missing_gt:
        raise DataError(f"missing ground-truth masks for: {', '.join(missing_gt)}")
    gts = {r.image_id: np.asarray(m) for r, m in samples}
    if isinstance(source, (str, Path)):
        directory = Path(source)
        probs = {}
        for r, _ in samples:
            npy, png = directory / f"{r.image_id}.npy", directory / f"{r.image_id}.png"
            if npy.exists():
                probs[r.image_id] = np.load(npy)
            elif png.exists():
                probs[r.image_id] = load_mask_png(png).astype(np.float32)
    else:
        maps = predict_maps(source, [r for r, _ in samples])
        probs = {r.image_id: postprocess(m, config.rect_postprocess) for (r, _), m in zip(samples, maps)}
    return evaluate_predictions(gts, probs, classes, config)
