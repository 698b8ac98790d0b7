"""Run directories and the end-to-end steps behind each CLI verb.

::

    <run-dir>/
      config.yaml           effective config of the latest command
      configs/<verb>.yaml   effective config of each command
      data/                 dataset (unless dataset.path points elsewhere)
      checkpoints/<name>.pt + <name>.json
      history/<name>.json   per-epoch training curves
      stacks/<split>.npz    specialized-model prediction stacks
      predictions/<model>/<image_id>.npy|.png
      reports/<model>/report.json|csv
      report.json           copy of the latest evaluation
      plots/
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout

from .config import ExperimentConfig
from .data import (
    Dataset,
    ImageRecord,
    generate_synthetic_dataset,
    group_boxes,
    load_and_normalize_scan,
    load_dataset,
    make_balanced_subset,
    make_pairs,
    make_splits,
    parse_annotations,
    rasterize_mask,
    read_pairs,
    synthetic_splits,
    write_dataset,
    write_pairs,
)
from .data.scans import save_mask_png
from .ensembles import apply_model_ensemble, max_ensemble, save_stacks, train_model_ensemble
from .errors import ConfigError, DataError, IngestionError, MissingDependencyError, PipelineError
from .metrics import EvalReport, evaluate_sets
from .models import (
    ModelHandle,
    assemble_chexnomaly,
    build_siamese,
    build_unet,
    load_handle,
    predict_maps,
    save_handle,
    train_segmentation,
    train_siamese,
)
from .models.training import binarize, postprocess

log = logging.getLogger(__name__)


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    def __truediv__(self, other: str) -> Path:
        return self.path / other

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.pt"

    def lock(self) -> FileLock:
        self.path.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path / ".lock"), timeout=0)

    def snapshot(self, cfg: ExperimentConfig, verb: str) -> None:
        cfg.save(self.path / "config.yaml")
        cfg.save(self.path / "configs" / f"{verb}.yaml")

    def dataset_dir(self, cfg: ExperimentConfig) -> Path:
        return Path(cfg.dataset.path) if cfg.dataset.path else self.path / "data"

    def save_history(self, name: str, history: dict) -> None:
        path = self.path / "history" / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")


def locked(run: RunDir) -> FileLock:
    lock = run.lock()
    try:
        lock.acquire()
        return lock
    except Timeout:
        raise PipelineError(f"run directory {run.path} is in use by another command (lock file .lock)") from None


# ---------------------------------------------------------------- data preparation


def split_records(
    records: Sequence[ImageRecord],
    held_out: int | None,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
    unseen_ratio=(4, 10),
) -> dict[str, list[str]]:
    """train/val/test over scans without the held-out class, plus an "unseen" set."""
    if held_out is None:
        train, val, test = make_splits([r.image_id for r in records], tuple(ratios), seed)
        return {"train": train, "val": val, "test": test}

    class _Sample:
        def __init__(self, r):
            self.record, self.image_id, self.class_ids = r, r.image_id, r.class_ids

    return synthetic_splits([_Sample(r) for r in records], held_out, tuple(ratios), seed, tuple(unseen_ratio))


def _class_names(records: Sequence[ImageRecord]) -> dict[str, str]:
    names = {}
    for r in records:
        for b in r.boxes:
            if b.is_finding:
                names[str(b.class_id)] = b.class_name
    return dict(sorted(names.items(), key=lambda kv: int(kv[0])))


def _try_pairs(records: Sequence[ImageRecord], n: int, seed: int, what: str):
    try:
        return make_pairs(records, n, seed)
    except DataError as exc:
        log.warning("no %s pairs: %s", what, exc)
        return None


def write_pair_manifests(ds_dir: Path, ds: Dataset, cfg: ExperimentConfig) -> None:
    """Pair lists for Siamese training; a split without both kinds of scan gets none."""
    for name, n, seed in (("train", cfg.dataset.train_pairs, cfg.seed), ("val", cfg.dataset.val_pairs, cfg.seed + 1)):
        path = ds_dir / f"pairs_{name}.csv"
        pairs = _try_pairs(ds.subset(name), n, seed, name) if ds.subset(name) else None
        if pairs:
            write_pairs(pairs, path)
        elif path.exists():
            path.unlink()


def synth(cfg: ExperimentConfig, out: Path) -> Dataset:
    spec = cfg.synthetic_spec()
    spec.validate()
    samples = generate_synthetic_dataset(spec, cfg.seed)
    records = [s.record for s in samples]
    masks = {s.image_id: s.mask for s in samples}
    splits = synthetic_splits(samples, spec.held_out_class, tuple(cfg.dataset.split_ratios), cfg.seed,
                              tuple(cfg.dataset.unseen_ratio))
    from .data.synthetic import class_pattern

    meta = {
        "source": "synthetic",
        "image_size": spec.image_size,
        "n_classes": spec.n_classes,
        "held_out_class": spec.held_out_class,
        "class_names": {str(k): class_pattern(k)[0] for k in range(spec.n_classes)},
        "seed": cfg.seed,
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
    }
    write_dataset(out, records, masks, splits, meta)
    ds = load_dataset(out)
    write_pair_manifests(out, ds, cfg)
    return ds


def _find_scan(dicom_dir: Path, image_id: str) -> Path | None:
    for ext in (".dicom", ".dcm", ""):
        p = dicom_dir / f"{image_id}{ext}"
        if p.is_file():
            return p
    return None


def ingest(cfg: ExperimentConfig, annotations: Path, dicom_dir: Path, out: Path, size: int) -> Dataset:
    if not annotations.exists():
        raise DataError(f"annotation file {annotations} not found")
    with open(annotations, newline="") as fh:
        boxes = group_boxes(parse_annotations(fh))
    missing = [i for i in boxes if _find_scan(dicom_dir, i) is None]
    if missing:
        raise DataError(f"no scan file for: {', '.join(sorted(missing))}")
    records, masks, failed = [], {}, []
    for image_id in sorted(boxes):
        try:
            rec = load_and_normalize_scan(_find_scan(dicom_dir, image_id), size, boxes[image_id], image_id)
        except IngestionError as exc:
            failed.append(f"{image_id} ({exc})")
            continue
        records.append(rec)
        masks[image_id] = rasterize_mask(rec.boxes, rec.original_size, size)
    if failed:
        log.warning("skipped %d unreadable scans: %s", len(failed), "; ".join(failed))
    if not records:
        raise DataError("no scan could be ingested")
    splits = split_records(records, cfg.dataset.held_out_class, cfg.dataset.split_ratios, cfg.seed, cfg.dataset.unseen_ratio)
    meta = {
        "source": "real",
        "image_size": size,
        "held_out_class": cfg.dataset.held_out_class,
        "class_names": _class_names(records),
        "original_sizes": {r.image_id: list(r.original_size) for r in records},
        "skipped": failed,
    }
    write_dataset(out, records, masks, splits, meta)
    ds = load_dataset(out)
    write_pair_manifests(out, ds, cfg)
    return ds


def resplit(cfg: ExperimentConfig, ds_dir: Path) -> Dataset:
    ds = load_dataset(ds_dir)
    held = ds.meta.get("held_out_class")
    splits = split_records(list(ds.records.values()), held, cfg.dataset.split_ratios, cfg.seed, cfg.dataset.unseen_ratio)
    (ds_dir / "splits.json").write_text(json.dumps(splits, indent=2) + "\n")
    ds.splits = splits
    write_pair_manifests(ds_dir, ds, cfg)
    return ds


def open_dataset(cfg: ExperimentConfig, run: RunDir) -> Dataset:
    ds_dir = run.dataset_dir(cfg)
    if not (ds_dir / "dataset.json").exists():
        raise MissingDependencyError(f"dataset {ds_dir} not found; run `synth` or `ingest` first")
    ds = load_dataset(ds_dir)
    for name in ("train", "val"):
        if name not in ds.splits:
            raise DataError(f"dataset {ds_dir} has no {name!r} split; run `split`")
    return ds


# ---------------------------------------------------------------- training


def _val_samples(ds: Dataset):
    val = ds.samples("val")
    return val or None


def _save(run: RunDir, handle: ModelHandle, name: str, history: dict) -> Path:
    path = save_handle(handle, run.checkpoints, name)
    run.save_history(name, history)
    return path


def specialized_classes(ds: Dataset) -> list[int]:
    """Every finding class present in the training split (the held-out class never is)."""
    return sorted({c for r in ds.subset("train") for c in r.class_ids})


def train_family(cfg: ExperimentConfig, run: RunDir, family: str) -> list[Path]:
    ds = open_dataset(cfg, run)
    size = ds.image_size
    tc = cfg.train_config()
    loss = cfg.seg_loss()
    written: list[Path] = []

    if family == "specialized":
        val_records = ds.subset("val")
        for k in specialized_classes(ds):
            data = make_balanced_subset(ds.subset("train"), k, cfg.seed)
            try:
                val = make_balanced_subset(val_records, k, cfg.seed)
            except DataError:
                val = None
            handle, hist = train_segmentation(build_unet(cfg.unet_config(size), cfg.seed), data, loss, tc, val)
            written.append(_save(run, handle, f"specialized_{k}", hist))
    elif family == "supermodel":
        handle, hist = train_segmentation(build_unet(cfg.unet_config(size), cfg.seed), ds.samples("train"), loss, tc,
                                          _val_samples(ds))
        written.append(_save(run, handle, "supermodel", hist))
    elif family == "siamese":
        pairs, val_pairs = _pairs(cfg, ds)
        handle, hist = train_siamese(build_siamese(cfg.siamese_config(size), cfg.seed), pairs, cfg.contrastive(),
                                     cfg.train_config(siamese=True), val_pairs)
        written.append(_save(run, handle, "siamese", hist))
    elif family == "chexnomaly":
        sia_path = Path(cfg.model.siamese_checkpoint) if cfg.model.siamese_checkpoint else run.checkpoint("siamese")
        if not sia_path.exists():
            raise MissingDependencyError(f"chexnomaly needs a trained siamese checkpoint: {sia_path} not found")
        siamese = load_handle(sia_path)
        init = None
        if cfg.model.init_from_supermodel:
            sup_path = run.checkpoint("supermodel")
            if not sup_path.exists():
                raise MissingDependencyError(
                    f"model.init_from_supermodel is set but {sup_path} is missing; train the supermodel first"
                )
            init = load_handle(sup_path)
        handle = assemble_chexnomaly(siamese, cfg.unet_config(size), tc, ds.samples("train"), loss, _val_samples(ds),
                                     variant=cfg.model.siamese.get("variant"), init_from=init)
        written.append(_save(run, handle, "chexnomaly", handle.history))
    elif family == "model_ensemble":
        specs = load_specialized(run)
        stacks = {}
        for split in ("train", "val"):
            recs = ds.subset(split)
            if recs:
                stacks[split] = dict(zip([r.image_id for r in recs], specialized_stacks(specs, recs)))
                save_stacks(run / "stacks" / f"{split}.npz", stacks[split])
        data = [(stacks["train"][i], ds.masks[i]) for i in ds.splits["train"]]
        val = [(stacks["val"][i], ds.masks[i]) for i in ds.splits["val"]] if "val" in stacks else None
        handle = train_model_ensemble(data, tc, cfg.seg_loss(ensemble=True), val, cfg.model.fusion_width)
        written.append(_save(run, handle, "model_ensemble", handle.history))
    else:
        raise ConfigError(f"unknown model family {family!r}")
    return written


def _pairs(cfg: ExperimentConfig, ds: Dataset):
    root = ds.root
    if root is not None and (root / "pairs_train.csv").exists():
        pairs = read_pairs(root / "pairs_train.csv", ds.records)
        val_path = root / "pairs_val.csv"
        val_pairs = read_pairs(val_path, ds.records) if val_path.exists() else None
    else:
        pairs = make_pairs(ds.subset("train"), cfg.dataset.train_pairs, cfg.seed)
        val_pairs = _try_pairs(ds.subset("val"), cfg.dataset.val_pairs, cfg.seed + 1, "val") if ds.subset("val") else None
    return pairs, val_pairs


def load_specialized(run: RunDir) -> list[ModelHandle]:
    paths = sorted(run.checkpoints.glob("specialized_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise MissingDependencyError(f"no specialized checkpoints in {run.checkpoints}; train family=specialized first")
    return [load_handle(p) for p in paths]


def specialized_stacks(models: Sequence[ModelHandle], records: Sequence[ImageRecord]) -> np.ndarray:
    """(N, K, S, S) stack of every specialized model's map for each record."""
    return np.stack([predict_maps(m, records) for m in models], axis=1)


# ---------------------------------------------------------------- evaluation

DEFAULT_EVAL_MODEL = {
    "specialized": "max_ensemble",
    "supermodel": "supermodel",
    "chexnomaly": "chexnomaly",
    "model_ensemble": "model_ensemble",
}


def predict_with(run: RunDir, model: str, records: Sequence[ImageRecord]) -> tuple[np.ndarray, dict]:
    """Probability maps from a named model of the run, plus provenance metadata."""
    if model == "max_ensemble":
        specs = load_specialized(run)
        stack = specialized_stacks(specs, records)
        maps = np.stack([max_ensemble(s) for s in stack]) if len(records) else stack[:, 0]
        return maps, {"members": [m.fingerprint for m in specs]}
    if model == "model_ensemble":
        fusion = _load(run, "model_ensemble")
        specs = load_specialized(run)
        stack = specialized_stacks(specs, records)
        return np.stack([apply_model_ensemble(fusion, s) for s in stack]), {
            "fingerprint": fusion.fingerprint, "members": [m.fingerprint for m in specs]}
    if model == "siamese":
        raise ConfigError("the siamese model scores pairs, it does not produce masks; evaluate chexnomaly instead")
    handle = _load(run, model)
    return predict_maps(handle, records), {"fingerprint": handle.fingerprint, "kind": handle.kind}


def _load(run: RunDir, name: str) -> ModelHandle:
    path = run.checkpoint(name)
    if not path.exists():
        raise MissingDependencyError(f"checkpoint {path} not found; train it first")
    return load_handle(path)


def image_class(ds: Dataset, image_id: str) -> str:
    rec = ds.records[image_id]
    names = sorted({b.class_name for b in rec.boxes if b.is_finding})
    return "+".join(names) if names else "none"


def evaluate(cfg: ExperimentConfig, run: RunDir, model: str, sets: Sequence[str] | None = None) -> EvalReport:
    ds = open_dataset(cfg, run)
    wanted = list(sets or cfg.eval.sets)
    chosen = {}
    for name in wanted:
        ids = ds.splits.get(name)
        if ids is None:
            raise DataError(f"dataset has no {name!r} split (available: {sorted(ds.splits)})")
        if ids:
            chosen[name] = ids
    ids = sorted({i for v in chosen.values() for i in v})
    missing = [i for i in ids if i not in ds.masks]
    if missing:
        raise DataError(f"missing ground-truth masks for: {', '.join(missing)}")
    records = [ds.records[i] for i in ids]
    ec = cfg.eval_config()
    maps, provenance = predict_with(run, model, records)
    probs = {i: postprocess(m, ec.rect_postprocess) for i, m in zip(ids, maps)}

    pred_dir = run / "predictions" / model
    if pred_dir.exists():
        shutil.rmtree(pred_dir)
    pred_dir.mkdir(parents=True)
    for image_id, prob in probs.items():
        np.save(pred_dir / f"{image_id}.npy", prob.astype(np.float32))
        save_mask_png(binarize(prob, ec.threshold), pred_dir / f"{image_id}.png")

    classes = {i: image_class(ds, i) for i in ids}
    report = evaluate_sets(chosen, ds.masks, probs, classes, ec)
    report.metadata.update({
        "model": model,
        "provenance": provenance,
        "seed": cfg.seed,
        "sets": {k: len(v) for k, v in chosen.items()},
        "held_out_class": ds.meta.get("held_out_class"),
    })
    out = run / "reports" / model
    report.save(out)
    report.save(run.path)
    return report
