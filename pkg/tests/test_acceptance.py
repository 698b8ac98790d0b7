"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 6, 7/8 and 10
train networks and take minutes on one CPU core.
"""
from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
import torch
import yaml

from cxr_anomaly.cli import main
from cxr_anomaly.data import (
    SyntheticSpec,
    generate_synthetic_dataset,
    make_balanced_subset,
    make_pairs,
    synthetic_splits,
)
from cxr_anomaly.ensembles import max_ensemble
from cxr_anomaly.losses import ContrastiveParams, FocalParams, contrastive_loss, focal_loss, rect_focal_loss, rect_transform
from cxr_anomaly.metrics import ConfusionCategory, categorize, iou, pixel_f1, pixel_mae
from cxr_anomaly.models import (
    AttentionGate,
    SegLossConfig,
    SiameseConfig,
    TrainConfig,
    UNetConfig,
    assemble_chexnomaly,
    build_siamese,
    build_unet,
    evaluate_pairs,
    predict_maps,
    train_segmentation,
    train_siamese,
)

from oracles import (
    bbox_bits,
    bits_to_maps,
    categorize_oracle,
    central_difference_grad,
    connected_5x5_masks,
    count_metrics,
    filled_bbox,
    focal_pixel,
    random_blob,
    random_mask_pair,
    relative_error,
)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line outside pytest's capture, then return the flag."""

    def _say(number: int, ok: bool, detail: str, started: float | None = None) -> bool:
        took = f" [{time.time() - started:.1f}s]" if started is not None else ""
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}{took}", flush=True)
        return ok

    return _say


# ---------------------------------------------------------------- 1. focal oracle


def test_criterion_1_focal_single_pixels(verdict):
    t = time.time()
    eps = 1e-7
    # closed forms written out by hand: alpha (1-p)^gamma (-ln p) and (1-alpha) p^gamma (-ln(1-p))
    cases = [
        (1, 0.9, 0.25 * 0.1**2 * -math.log(0.9), 2.634e-4),
        (0, 0.5, 0.75 * 0.5**2 * -math.log(0.5), 0.1300),
        (1, 1 - eps, 0.25 * eps**2 * -math.log(1 - eps), 0.0),
    ]
    worst, rounded_ok = 0.0, True
    for y, p, hand, stated in cases:
        got = focal_loss(torch.tensor([[float(y)]], dtype=torch.float64), torch.tensor([[p]], dtype=torch.float64),
                         FocalParams()).item()
        worst = max(worst, abs(got - hand), abs(got - focal_pixel(y, p)))
        # the stated values are the hand results rounded to 4 significant digits
        rounded_ok &= float(f"{hand:.4g}") == stated if stated else hand < 1e-12
    ok = worst <= 1e-6 and rounded_ok
    assert verdict(1, ok, f"max |package - hand computation| = {worst:.2e} (tol 1e-6); "
                          f"values 2.634e-4 / 0.1300 / ~0", t)


# ---------------------------------------------------------------- 2. gradient checks


def _rect_point(rng):
    while True:
        pred = rng.uniform(0.02, 0.6, (6, 6))
        rows = (pred**8).sum(1) ** (1 / 8)
        cols = (pred**8).sum(0) ** (1 / 8)
        if np.all(np.abs(np.concatenate([rows, cols]) - 1) > 1e-2):  # away from the clip kink
            return (rng.random((6, 6)) < 0.4).astype(np.float64), pred


def test_criterion_2_gradient_checks(verdict):
    t = time.time()
    rng = np.random.default_rng(101)
    worst_rect = 0.0
    for _ in range(100):
        y, p = _rect_point(rng)
        pt = torch.tensor(p, requires_grad=True)
        rect_focal_loss(y, pt, sharpness=8.0).backward()
        fd = central_difference_grad(lambda x: rect_focal_loss(y, x, sharpness=8.0).item(), p.copy())
        worst_rect = max(worst_rect, relative_error(pt.grad.numpy(), fd))

    worst_con, checked = 0.0, 0
    while checked < 100:
        a, b = rng.normal(size=16) * 0.2, rng.normal(size=16) * 0.2
        label = int(rng.integers(0, 2))
        d = float(np.linalg.norm(a - b))
        if d < 1e-3 or abs(d - 1.0) < 1e-3:
            continue  # sqrt origin and hinge kink are not differentiable
        x = np.concatenate([a, b])
        xt = torch.tensor(x, requires_grad=True)
        contrastive_loss(xt[:16], xt[16:], label).backward()
        fd = central_difference_grad(lambda v: contrastive_loss(v[:16], v[16:], label).item(), x.copy())
        worst_con = max(worst_con, relative_error(xt.grad.numpy(), fd))
        checked += 1
    ok = worst_rect < 1e-4 and worst_con < 1e-4
    assert verdict(2, ok, f"worst relative error rect_focal {worst_rect:.2e}, contrastive {worst_con:.2e} (tol 1e-4)", t)


# ---------------------------------------------------------------- 3. rect_transform oracle


def test_criterion_3_rect_exact_oracle(verdict):
    t = time.time()
    bits = connected_5x5_masks()
    expected = bbox_bits(bits)
    mismatches = 0
    for start in range(0, len(bits), 400_000):
        chunk = bits[start : start + 400_000]
        out = rect_transform(torch.from_numpy(bits_to_maps(chunk)).float(), "exact").numpy()
        mismatches += int(np.any(out != bits_to_maps(expected[start : start + 400_000]), axis=(1, 2)).sum())
    rng = np.random.default_rng(102)
    blob_bad = 0
    for _ in range(200):
        m = random_blob(32, rng)
        blob_bad += int(not np.array_equal(rect_transform(m.astype(np.float64), "exact").numpy(), filled_bbox(m)))
    ok = mismatches == 0 and blob_bad == 0 and len(bits) == 2_301_877
    assert verdict(3, ok, f"{len(bits)} connected 5x5 masks, {mismatches} mismatches; 200 blobs 32x32, {blob_bad} mismatches", t)


# ---------------------------------------------------------------- 4. metric oracles


def test_criterion_4_metric_oracles(verdict):
    t = time.time()
    rng = np.random.default_rng(103)
    worst, cat_bad = 0.0, 0
    for _ in range(500):
        g, p = random_mask_pair(rng)
        ref = count_metrics(g, p)
        worst = max(worst, abs(pixel_mae(g, p) - ref["mae"]), abs(iou(g, p) - ref["iou"]), abs(pixel_f1(g, p) - ref["f1"]))
        cat_bad += categorize(g, p).value != categorize_oracle(g, p)
    z = np.zeros((16, 16), np.uint8)
    g = np.zeros((64, 64), np.uint8)
    g[10:30, 10:30] = 1
    p = g.copy()
    p[10:15, 10:20] = 0
    conventions = (
        iou(z, z) == 1.0
        and categorize(z, z) is ConfusionCategory.TN
        and np.count_nonzero(g ^ p) == 50
        and categorize(g, p) is ConfusionCategory.TP
    )
    ok = worst <= 1e-12 and cat_bad == 0 and conventions
    assert verdict(4, ok, f"500 pairs: max metric error {worst:.1e}, {cat_bad} category mismatches; "
                          f"empty/empty and 50-px conventions {'hold' if conventions else 'BROKEN'}", t)


# ---------------------------------------------------------------- 5. ensemble oracle


def test_criterion_5_max_ensemble_oracle(verdict):
    t = time.time()
    rng = np.random.default_rng(104)
    bad = 0
    for _ in range(100):
        s = rng.random((5, 8, 8))
        out = max_ensemble(list(s))
        ref = np.empty((8, 8))
        for i in range(8):
            for j in range(8):
                ref[i, j] = max(s[k, i, j] for k in range(5))
        bad += int(not np.array_equal(out, ref))
    assert verdict(5, bad == 0, f"100 stacks K=5 8x8, {bad} differ from the pixel loop", t)


# ---------------------------------------------------------------- 6. Siamese pair accuracy

SIAMESE_SIZE = 128
SIAMESE_PAIRS = 400


@pytest.fixture(scope="module")
def siamese_pairs():
    spec = SyntheticSpec(n_images=300, image_size=SIAMESE_SIZE, n_classes=5, held_out_class=4,
                         anomalies_per_image=(1, 2), box_size=(SIAMESE_SIZE // 10, SIAMESE_SIZE // 4))
    samples = generate_synthetic_dataset(spec, 0)
    splits = synthetic_splits(samples, 4, seed=0)
    by = {s.image_id: s.record for s in samples}
    pick = lambda name: [by[i] for i in splits[name]]  # noqa: E731
    return (make_pairs(pick("train"), SIAMESE_PAIRS, 0), make_pairs(pick("val"), 100, 1), make_pairs(pick("test"), 200, 2))


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["full_map", "compact_embedding"])
def test_criterion_6_siamese_pair_accuracy(variant, siamese_pairs, verdict):
    t = time.time()
    train, val, held_out = siamese_pairs
    cp = ContrastiveParams(1.0, normalize=True)
    model = build_siamese(SiameseConfig(variant=variant, input_size=SIAMESE_SIZE, base_filters=4), seed=0)
    model, hist = train_siamese(model, train, cp, TrainConfig(epochs=20, batch_size=8, seed=0, learning_rate=1e-3, patience=4), val)
    acc = evaluate_pairs(model, held_out, cp)["accuracy"]
    ok = acc >= 0.90 and hist["epochs_run"] <= 20
    assert verdict(6, ok, f"{variant}: held-out pair accuracy {acc:.3f} on {len(held_out)} test pairs "
                          f"(>= 0.90), {len(train)} train pairs at {SIAMESE_SIZE}px, {hist['epochs_run']} epochs", t)


# ---------------------------------------------------------------- 7/8. generalization ordering, freeze contract

GEN_SEEDS = (0, 1, 2)
GEN_SIZE = 64
HELD_OUT = 4


def _held_out_iou(handle, samples) -> float:
    maps = predict_maps(handle, [s.record for s in samples])
    return float(np.mean([iou(s.mask, m >= 0.5) for s, m in zip(samples, maps)]))


def _generalization_run(seed: int) -> dict:
    spec = SyntheticSpec(n_images=300, image_size=GEN_SIZE, n_classes=5, held_out_class=HELD_OUT,
                         anomalies_per_image=(1, 2), box_size=(GEN_SIZE // 10, GEN_SIZE // 4))
    samples = generate_synthetic_dataset(spec, seed)
    splits = synthetic_splits(samples, HELD_OUT, seed=seed)
    by = {s.image_id: s for s in samples}
    train = [by[i] for i in splits["train"]]
    val = [by[i] for i in splits["val"]]
    unseen = [by[i] for i in splits["unseen"] if HELD_OUT in by[i].class_ids]
    seg = [(s.record, s.mask) for s in train]
    seg_val = [(s.record, s.mask) for s in val]

    ucfg = UNetConfig(GEN_SIZE, 4, 8)
    loss = SegLossConfig()
    tc = TrainConfig(epochs=20, batch_size=8, seed=seed, patience=5)

    seen_classes = sorted({c for s in train for c in s.class_ids})
    maps = []
    for k in seen_classes:
        subset = make_balanced_subset([s.record for s in train], k, seed)
        try:
            val_subset = make_balanced_subset([s.record for s in val], k, seed)
        except ValueError:
            val_subset = None
        h, _ = train_segmentation(build_unet(ucfg, seed), subset, loss, tc, val_subset)
        maps.append(predict_maps(h, [s.record for s in unseen]))
    fused = np.max(np.stack(maps), axis=0)
    maxens = float(np.mean([iou(s.mask, m >= 0.5) for s, m in zip(unseen, fused)]))

    supermodel, _ = train_segmentation(build_unet(ucfg, seed), seg, loss, tc, seg_val)
    super_iou = _held_out_iou(supermodel, unseen)

    pairs = make_pairs([s.record for s in train], 400, seed)
    val_pairs = make_pairs([s.record for s in val], 100, seed + 1)
    siamese = build_siamese(SiameseConfig(variant="full_map", input_size=GEN_SIZE), seed)
    siamese, _ = train_siamese(siamese, pairs, ContrastiveParams(1.0, True),
                               TrainConfig(epochs=12, batch_size=8, seed=seed, learning_rate=1e-3, patience=4), val_pairs)
    branch_before = {k: v.detach().clone() for k, v in siamese.module.branch.state_dict().items()}
    chex = assemble_chexnomaly(siamese, ucfg, tc, seg, loss, seg_val, init_from=supermodel)
    after = chex.module.extractor.state_dict()
    frozen_same = set(after) == set(branch_before) and all(torch.equal(after[k], branch_before[k]) for k in after)
    return {
        "seed": seed,
        "n_unseen": len(unseen),
        "specialized": len(seen_classes),
        "max_ensemble": maxens,
        "supermodel": super_iou,
        "chexnomaly": _held_out_iou(chex, unseen),
        "frozen_unchanged": frozen_same,
        "frozen_tensors": len(after),
    }


@pytest.fixture(scope="module")
def generalization():
    t = time.time()
    runs = [_generalization_run(seed) for seed in GEN_SEEDS]
    return runs, time.time() - t


@pytest.mark.slow
def test_criterion_7_generalization_ordering(generalization, verdict, capsys):
    runs, took = generalization
    with capsys.disabled():
        for r in runs:
            print(f"\n  seed {r['seed']}: held-out IoU chexnomaly {r['chexnomaly']:.4f}  supermodel {r['supermodel']:.4f}  "
                  f"max-ensemble({r['specialized']}) {r['max_ensemble']:.4f}  (n={r['n_unseen']})", end="")
    mean = {k: float(np.mean([r[k] for r in runs])) for k in ("chexnomaly", "supermodel", "max_ensemble")}
    ok = mean["chexnomaly"] >= mean["supermodel"] >= mean["max_ensemble"] and mean["chexnomaly"] >= 0.3
    assert verdict(7, ok, f"3-seed mean held-out IoU chexnomaly {mean['chexnomaly']:.4f} >= supermodel "
                          f"{mean['supermodel']:.4f} >= max-ensemble {mean['max_ensemble']:.4f}; chexnomaly >= 0.3 "
                          f"[{took:.0f}s for all seeds]")


@pytest.mark.slow
def test_criterion_8_freeze_contract(generalization, verdict):
    runs, _ = generalization
    ok = all(r["frozen_unchanged"] for r in runs)
    assert verdict(8, ok, f"frozen Siamese branch bitwise unchanged after fine-tuning in "
                          f"{sum(r['frozen_unchanged'] for r in runs)}/{len(runs)} seeds "
                          f"({runs[0]['frozen_tensors']} tensors each)")


# ---------------------------------------------------------------- 9. attention variant


def test_criterion_9_attention_variant(verdict):
    t = time.time()
    counts_ok = True
    for depth in (1, 2, 3, 4):
        plain = build_unet(UNetConfig(64, depth, 8, attention=False))
        gated = build_unet(UNetConfig(64, depth, 8, attention=True))
        n_gates = sum(isinstance(m, AttentionGate) for m in gated.module.modules())
        counts_ok &= gated.parameter_count > plain.parameter_count and n_gates == depth
    spec = SyntheticSpec(n_images=24, image_size=32, n_classes=3, held_out_class=2, anomalies_per_image=(1, 1), box_size=(6, 10))
    data = [(s.record, s.mask) for s in generate_synthetic_dataset(spec, seed=1)[:10]]
    _, hist = train_segmentation(build_unet(UNetConfig(32, 2, 8, attention=True)), data, SegLossConfig(),
                                 TrainConfig(epochs=20, batch_size=5, learning_rate=3e-3))
    ratio = hist["train_loss"][19] / hist["train_loss"][0]
    ok = counts_ok and ratio < 0.5
    assert verdict(9, ok, f"params strictly larger and gates == depth for depth 1-4: {counts_ok}; "
                          f"overfit loss ratio epoch20/epoch1 {ratio:.3f} (< 0.5)", t)


# ---------------------------------------------------------------- 10. pipeline determinism

DESK = {
    "seed": 7,
    "dataset": {"train_pairs": 100, "val_pairs": 20, "synthetic": {"n_images": 80, "image_size": 32, "box_size": [4, 10]}},
    "model": {"unet": {"depth": 3, "base_filters": 4}, "siamese": {"variant": "full_map", "depth": 3, "base_filters": 4}},
    "training": {"epochs": 4, "siamese_epochs": 3},
}


@pytest.mark.slow
def test_criterion_10_pipeline_determinism(tmp_path, verdict):
    t = time.time()
    cfg = tmp_path / "desk.yaml"
    cfg.write_text(yaml.safe_dump(DESK))
    reports = []
    for name in ("first", "second"):
        run = str(tmp_path / name)
        base = ["--config", str(cfg), "--run-dir", run]
        codes = [main(base + ["synth"])]
        for family in ("supermodel", "siamese", "chexnomaly"):
            codes.append(main(base + ["train", "--family", family]))
        codes.append(main(base + ["eval", "--model", "chexnomaly"]))
        assert codes == [0] * len(codes), codes
        reports.append((tmp_path / name / "report.json").read_bytes())
    ok = reports[0] == reports[1]
    n = json.loads(reports[0])["aggregates"]["n_images"]
    assert verdict(10, ok, f"synth -> train (supermodel, siamese, chexnomaly) -> eval run twice: report.json "
                           f"{'byte-identical' if ok else 'DIFFERS'} ({len(reports[0])} bytes, {n} images)", t)
