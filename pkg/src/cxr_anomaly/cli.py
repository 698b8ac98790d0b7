"""``cxr-anomaly`` command line: synth, ingest, split, train, eval, report.

Exit codes: 0 success, 1 other pipeline failure, 2 configuration error,
3 missing prerequisite (checkpoint, dataset), 4 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import FAMILIES, ExperimentConfig, load_config
from .errors import ConfigError, MissingDependencyError, PipelineError

log = logging.getLogger("cxr_anomaly")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxr-anomaly", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="experiment YAML (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--run-dir", type=Path, default=Path("runs/default"), help="experiment directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="generate a seeded phantom dataset")
    s.add_argument("--out", type=Path, help="dataset directory (default: dataset.path or <run-dir>/data)")

    s = sub.add_parser("ingest", help="convert VinDr-CXR annotations + DICOM scans into a dataset")
    s.add_argument("--annotations", type=Path)
    s.add_argument("--dicom-dir", type=Path)
    s.add_argument("--size", type=int, help="target image size in pixels")
    s.add_argument("--out", type=Path)

    s = sub.add_parser("split", help="recompute split manifests and pair lists of a dataset")
    s.add_argument("--dataset", type=Path)

    s = sub.add_parser("train", help="train one model family")
    s.add_argument("--family", choices=FAMILIES, help="default: model.family from the config")

    s = sub.add_parser("eval", help="predict and score a trained model on the configured sets")
    s.add_argument("--model", help="supermodel, chexnomaly, max_ensemble, model_ensemble or specialized_<k>")
    s.add_argument("--sets", nargs="+", help="split names, default: eval.sets from the config")

    s = sub.add_parser("report", help="plots and a comparison table across evaluated runs")
    s.add_argument("runs", nargs="*", type=Path, help="run directories or report directories")
    s.add_argument("--out", type=Path, help="default: <run-dir>/plots")
    s.add_argument("--overlay-count", type=int, default=6)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def cmd_synth(cfg: ExperimentConfig, run: ex.RunDir, args) -> int:
    out = args.out or run.dataset_dir(cfg)
    ds = ex.synth(cfg, out)
    counts = {k: len(v) for k, v in ds.splits.items()}
    n_pos = sum(r.is_positive for r in ds.records.values())
    print(f"wrote {len(ds.records)} images ({n_pos} with findings) to {out}")
    print("splits: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_ingest(cfg: ExperimentConfig, run: ex.RunDir, args) -> int:
    ann = args.annotations or (Path(cfg.dataset.annotations) if cfg.dataset.annotations else None)
    dcm = args.dicom_dir or (Path(cfg.dataset.dicom_dir) if cfg.dataset.dicom_dir else None)
    if ann is None or dcm is None:
        raise ConfigError("ingest needs --annotations and --dicom-dir (or dataset.annotations / dataset.dicom_dir)")
    out = args.out or run.dataset_dir(cfg)
    ds = ex.ingest(cfg, ann, dcm, out, args.size or cfg.dataset.image_size)
    print(f"ingested {len(ds.records)} scans into {out}")
    return 0


def cmd_split(cfg: ExperimentConfig, run: ex.RunDir, args) -> int:
    ds_dir = args.dataset or run.dataset_dir(cfg)
    ds = ex.resplit(cfg, ds_dir)
    print("splits: " + ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items()))
    return 0


def cmd_train(cfg: ExperimentConfig, run: ex.RunDir, args) -> int:
    family = args.family or cfg.model.family
    for path in ex.train_family(cfg, run, family):
        meta = json.loads(path.with_suffix(".json").read_text())
        print(f"{path.stem}: {meta['parameter_count']} parameters, fingerprint {meta['fingerprint']}")
    return 0


def cmd_eval(cfg: ExperimentConfig, run: ex.RunDir, args) -> int:
    model = args.model or ex.DEFAULT_EVAL_MODEL.get(cfg.model.family)
    if model is None:
        raise ConfigError(f"family {cfg.model.family!r} has no segmentation output; pass --model")
    rep = ex.evaluate(cfg, run, model, args.sets)
    for name, agg in [("all", rep.aggregates)] + sorted(rep.per_set.items()):
        print(f"{model} [{name}] n={agg['n_images']} mean IoU={agg['mean_iou']:.4f} "
              f"positive IoU={agg['mean_iou_positive']:.4f} MAE={agg['mean_mae']:.4f} "
              f"detection F1={agg['detection_f1_all']:.4f}")
    return 0


def cmd_report(cfg: ExperimentConfig, run: ex.RunDir, args) -> int:
    from .reporting import comparison_table, plot_class_heatmaps, plot_error_histogram, plot_overlays

    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    out = args.out or run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    reports, sources = {}, {}
    for path in args.runs:
        rep_file = path / "report.json" if path.is_dir() else path
        if not rep_file.exists():
            raise MissingDependencyError(f"no report.json under {path}; run `eval` first")
        rep = json.loads(rep_file.read_text())
        label = f"{_run_root(rep_file).name}:{rep.get('metadata', {}).get('model', rep_file.parent.name)}"
        reports[label] = rep
        sources[label] = _run_root(rep_file)
    (out / "comparison.csv").write_text(comparison_table(reports))
    for i, (label, rep) in enumerate(reports.items()):
        plot_error_histogram(rep["aggregates"]["histogram"], out / f"histogram_{i}_{_slug(label)}.png", label)

    first = next(iter(sources.values()))
    ds = _dataset_for(first)
    if ds is None:
        log.warning("dataset of %s not found; skipping heatmaps and overlays", first)
    else:
        by_class: dict[str, list] = {}
        for image_id, rec in sorted(ds.records.items()):
            if rec.is_positive and image_id in ds.masks:
                by_class.setdefault(ex.image_class(ds, image_id), []).append(ds.masks[image_id])
        if by_class:
            plot_class_heatmaps(by_class, out / "heatmaps.png")
        _overlays(reports, sources, ds, out, args.overlay_count, plot_overlays)
    print(f"wrote comparison.csv and plots for {len(reports)} run(s) to {out}")
    return 0


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in text)


def _run_root(rep_file: Path) -> Path:
    # <run>/report.json or <run>/reports/<model>/report.json
    parent = rep_file.parent
    return parent.parent.parent if parent.parent.name == "reports" else parent


def _dataset_for(run_root: Path):
    from .data import load_dataset

    cfg_file = run_root / "config.yaml"
    cfg = load_config(cfg_file, env={}) if cfg_file.exists() else ExperimentConfig()
    ds_dir = ex.RunDir(run_root).dataset_dir(cfg)
    if not (ds_dir / "dataset.json").exists():
        return None
    return load_dataset(ds_dir, require_masks=False)


def _overlays(reports, sources, ds, out: Path, count: int, plot_overlays) -> None:
    first = next(iter(reports.values()))
    ids = [r["image_id"] for r in first["per_image"] if r.get("gt_positive")][:count]
    preds = {}
    for label, rep in reports.items():
        model = rep.get("metadata", {}).get("model")
        pred_dir = sources[label] / "predictions" / str(model)
        if not all((pred_dir / f"{i}.npy").exists() for i in ids):
            continue
        preds[label] = {i: np.load(pred_dir / f"{i}.npy") >= first["metadata"]["eval_config"]["threshold"] for i in ids}
    if ids and preds:
        plot_overlays({i: ds.records[i].pixels for i in ids}, {i: ds.masks[i] for i in ids}, preds, ids,
                      out / "overlays.png")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        run = ex.RunDir(args.run_dir)
        lock = ex.locked(run)
        try:
            run.snapshot(cfg, args.verb if args.verb != "train" else f"train-{args.family or cfg.model.family}")
            return COMMANDS[args.verb](cfg, run, args)
        finally:
            lock.release()
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
