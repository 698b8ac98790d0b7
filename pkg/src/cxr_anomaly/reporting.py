"""Plots and comparison tables built from datasets, predictions and reports.

Figures go through the Agg backend with the default style and no timestamp
metadata, so regenerating a figure from unchanged inputs gives the same bytes.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COMPARISON_METRICS = (
    "n_images",
    "mean_mae",
    "mean_iou",
    "mean_iou_positive",
    "mean_pixel_f1",
    "detection_f1_all",
    "detection_f1_positive",
    "TP",
    "TN",
    "FP",
    "FN",
    "outliers",
)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _figure(n_panels: int, panel: float = 2.4, rows: int = 1):
    plt.style.use("default")
    cols = max(1, -(-n_panels // rows))
    fig, axes = plt.subplots(rows, cols, figsize=(panel * cols, panel * rows + 0.4), squeeze=False)
    return fig, axes


def mask_density(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Fraction of masks covering each pixel."""
    if not masks:
        raise ValueError("no masks to aggregate")
    return np.mean([np.asarray(m, dtype=np.float64) > 0 for m in masks], axis=0)


def plot_class_heatmaps(masks_by_class: Mapping[str, Sequence[np.ndarray]], path: str | Path) -> Path:
    """One density panel per class: where that class's boxes tend to fall."""
    names = sorted(masks_by_class)
    fig, axes = _figure(len(names))
    for ax, name in zip(axes.flat, names):
        im = ax.imshow(mask_density(masks_by_class[name]), cmap="Greens", vmin=0, vmax=1)
        ax.set_title(f"{name} (n={len(masks_by_class[name])})", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    for ax in list(axes.flat)[len(names):]:
        ax.axis("off")
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
    return _save(fig, path)


def plot_overlays(
    images: Mapping[str, np.ndarray],
    gts: Mapping[str, np.ndarray],
    preds: Mapping[str, Mapping[str, np.ndarray]],
    image_ids: Sequence[str],
    path: str | Path,
) -> Path:
    """Grid with one row per image: the scan, its ground truth, then each model's mask."""
    models = sorted(preds)
    n_cols = 2 + len(models)
    plt.style.use("default")
    fig, axes = plt.subplots(len(image_ids), n_cols, figsize=(2.0 * n_cols, 2.0 * len(image_ids) + 0.3), squeeze=False)
    for r, image_id in enumerate(image_ids):
        panels = [("image", None), ("ground truth", gts[image_id])] + [(m, preds[m][image_id]) for m in models]
        for c, (title, overlay) in enumerate(panels):
            ax = axes[r, c]
            ax.imshow(images[image_id], cmap="gray", vmin=0, vmax=1)
            if overlay is not None:
                ax.imshow(np.ma.masked_equal(np.asarray(overlay) > 0, False), cmap="autumn", alpha=0.45, vmin=0, vmax=1)
            if r == 0:
                ax.set_title(title, fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r, 0].set_ylabel(image_id, fontsize=7)
    return _save(fig, path)


def plot_error_histogram(histogram: Mapping, path: str | Path, title: str = "") -> Path:
    """Bar chart of per-image error percentages with the outlier threshold marked."""
    edges = np.asarray(histogram["edges"], dtype=float)
    counts = np.asarray(histogram["counts"], dtype=float)
    thr = float(histogram["outlier_threshold"])
    fig, axes = _figure(1, panel=4.0)
    ax = axes[0, 0]
    if counts.size:
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="#4c72b0", edgecolor="black", linewidth=0.4)
    ax.axvline(thr, color="red", linestyle="--", linewidth=1.0, label=f"{thr:g}% threshold")
    ax.set_xlabel("misclassified pixels (%)")
    ax.set_ylabel("images")
    ax.set_xlim(0, max(thr * 1.25, edges[-1] if edges.size else 0))
    ax.legend(fontsize=8)
    ax.set_title(f"{title} ({histogram['outliers']} above threshold)" if title else f"{histogram['outliers']} above threshold",
                 fontsize=9)
    return _save(fig, path)


def _metric_row(aggregates: Mapping) -> dict:
    row = {k: aggregates.get(k) for k in COMPARISON_METRICS if k in aggregates}
    row.update(aggregates.get("confusion", {}))
    row["outliers"] = aggregates.get("histogram", {}).get("outliers")
    return row


def comparison_table(reports: Mapping[str, Mapping]) -> str:
    """CSV with one row per metric and one column per (run, evaluation set).

    ``reports`` maps a run label to a report dict; each run contributes a
    column group with ``all`` plus one column per entry of its ``per_set``.
    """
    columns: list[tuple[str, str, Mapping]] = []
    for label in reports:
        rep = reports[label]
        columns.append((label, "all", _metric_row(rep["aggregates"])))
        for set_name in sorted(rep.get("per_set", {})):
            columns.append((label, set_name, _metric_row(rep["per_set"][set_name])))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric"] + [f"{label}/{set_name}" for label, set_name, _ in columns])
    for metric in COMPARISON_METRICS:
        cells = []
        for _, _, row in columns:
            v = row.get(metric)
            cells.append("" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v)))
        writer.writerow([metric] + cells)
    return buf.getvalue()
