import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cxr_anomaly.data import SyntheticSpec, generate_synthetic_dataset, make_pairs
from cxr_anomaly.errors import ConfigError, DataError, MissingDependencyError
from cxr_anomaly.losses import ContrastiveParams
from cxr_anomaly.models import (
    AttentionGate,
    SegLossConfig,
    SiameseConfig,
    TrainConfig,
    UNetConfig,
    assemble_chexnomaly,
    binarize,
    build_chexnomaly,
    build_fusion,
    build_siamese,
    build_unet,
    load_handle,
    predict_mask,
    predict_maps,
    save_handle,
    train_segmentation,
    train_siamese,
)
from cxr_anomaly.models.training import siamese_objective


@pytest.fixture(scope="module")
def tiny_data():
    spec = SyntheticSpec(n_images=24, image_size=32, n_classes=3, held_out_class=2, anomalies_per_image=(1, 1), box_size=(6, 10))
    return generate_synthetic_dataset(spec, seed=1)


# ----------------------------------------------------------------- U-Net


@pytest.mark.parametrize("attention", [False, True])
@pytest.mark.parametrize("size,depth", [(32, 2), (64, 4), (48, 3)])
def test_unet_shape_and_range(size, depth, attention):
    h = build_unet(UNetConfig(size, depth, 4, attention))
    x = torch.randn(2, 1, size, size) * 5
    out = h.module.eval()(x)
    assert out.shape == (2, 1, size, size)
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.slow
def test_unet_full_resolution_shape():
    h = build_unet(UNetConfig(512, 4, 2))
    with torch.no_grad():
        assert h.module.eval()(torch.zeros(1, 1, 512, 512)).shape == (1, 1, 512, 512)


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_attention_adds_parameters_and_one_gate_per_level(depth):
    plain = build_unet(UNetConfig(32, depth, 4, False))
    gated = build_unet(UNetConfig(32, depth, 4, True))
    assert gated.parameter_count > plain.parameter_count
    gates = [m for m in gated.module.modules() if isinstance(m, AttentionGate)]
    assert len(gates) == depth
    assert not any(isinstance(m, AttentionGate) for m in plain.module.modules())


def test_attention_coefficients_in_unit_interval():
    h = build_unet(UNetConfig(32, 3, 4, True))
    h.module.eval()(torch.randn(2, 1, 32, 32) * 10)
    for g in h.module.gates:
        c = g.last_coefficients
        assert c is not None and c.min() >= 0 and c.max() <= 1


@pytest.mark.parametrize("cfg", [UNetConfig(100, 4), UNetConfig(64, 0), UNetConfig(64, 2, 0)])
def test_unet_config_errors(cfg):
    with pytest.raises(ConfigError):
        build_unet(cfg)


def test_fingerprint_tracks_architecture():
    a, b = build_unet(UNetConfig(32, 2, 4), seed=0), build_unet(UNetConfig(32, 2, 4), seed=1)
    c = build_unet(UNetConfig(32, 2, 4, attention=True))
    assert a.fingerprint == b.fingerprint
    assert a.fingerprint != c.fingerprint


def test_seeded_build_is_reproducible():
    a, b = build_unet(UNetConfig(32, 2, 4), seed=3), build_unet(UNetConfig(32, 2, 4), seed=3)
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)


# ----------------------------------------------------------------- segmentation training


def test_overfit_ten_images(tiny_data):
    data = [(s.record, s.mask) for s in tiny_data[:10]]
    h = build_unet(UNetConfig(32, 2, 8))
    _, hist = train_segmentation(h, data, SegLossConfig(), TrainConfig(epochs=20, batch_size=5, learning_rate=3e-3))
    assert hist["train_loss"][4] < hist["train_loss"][0]
    assert hist["train_loss"][19] < 0.5 * hist["train_loss"][0]


def test_overfit_attention_variant(tiny_data):
    data = [(s.record, s.mask) for s in tiny_data[:10]]
    h = build_unet(UNetConfig(32, 2, 8, attention=True))
    _, hist = train_segmentation(h, data, SegLossConfig(), TrainConfig(epochs=20, batch_size=5, learning_rate=3e-3))
    assert hist["train_loss"][19] < 0.5 * hist["train_loss"][0]


def test_training_deterministic(tiny_data):
    data = [(s.record, s.mask) for s in tiny_data[:8]]
    runs = []
    for _ in range(2):
        _, hist = train_segmentation(build_unet(UNetConfig(32, 2, 4), seed=5), data, SegLossConfig(sharpness=8.0),
                                     TrainConfig(epochs=3, batch_size=4, seed=5))
        runs.append(hist["train_loss"])
    np.testing.assert_allclose(runs[0], runs[1], rtol=1e-3)


def test_training_errors(tiny_data):
    with pytest.raises(DataError):
        train_segmentation(build_unet(UNetConfig(32, 2, 4)), [], SegLossConfig(), TrainConfig(epochs=1))
    wrong = [(np.zeros((64, 64), np.float32), np.zeros((64, 64)))] * 2
    with pytest.raises(DataError):
        train_segmentation(build_unet(UNetConfig(32, 2, 4)), wrong, SegLossConfig(), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()


def test_nan_loss_aborts(tiny_data):
    from cxr_anomaly.errors import TrainingError

    bad = [(np.full((32, 32), np.nan, np.float32), s.mask) for s in tiny_data[:4]]
    with pytest.raises(TrainingError, match="epoch 1"):
        train_segmentation(build_unet(UNetConfig(32, 2, 4)), bad, SegLossConfig(), TrainConfig(epochs=1, batch_size=2))


def test_early_stopping_restores_best(tiny_data):
    data = [(s.record, s.mask) for s in tiny_data[:12]]
    val = [(s.record, s.mask) for s in tiny_data[12:18]]
    h, hist = train_segmentation(build_unet(UNetConfig(32, 2, 4)), data, SegLossConfig(),
                                 TrainConfig(epochs=6, batch_size=4, patience=2), val)
    assert 1 <= hist["best_epoch"] <= hist["epochs_run"]
    from cxr_anomaly.models.training import _eval_seg_loss, stack_inputs

    x = stack_inputs([d[0] for d in val])
    y = torch.from_numpy(np.stack([d[1] for d in val]).astype(np.float32))
    assert _eval_seg_loss(h.module, x, y, SegLossConfig(), 4) == pytest.approx(min(hist["val_loss"]), rel=1e-5)


# ----------------------------------------------------------------- inference


def test_predict_mask_contracts(tiny_data):
    h = build_unet(UNetConfig(32, 2, 4))
    prob, mask = predict_mask(h, tiny_data[0].record)
    assert prob.shape == (32, 32) and prob.min() >= 0 and prob.max() <= 1
    np.testing.assert_array_equal(mask, binarize(prob, 0.5))
    assert binarize(np.full((4, 4), 0.4)).sum() == 0
    with pytest.raises(ConfigError):
        binarize(prob, 1.0)
    with pytest.raises(DataError):
        predict_maps(h, [np.zeros((16, 16), np.float32)])
    p_rect, m_rect = predict_mask(h, tiny_data[0].record, rect_postprocess=True)
    np.testing.assert_array_equal(m_rect, binarize(p_rect))


def test_checkpoint_roundtrip(tmp_path, tiny_data):
    h = build_unet(UNetConfig(32, 2, 4, attention=True), seed=2)
    path = save_handle(h, tmp_path, "model")
    back = load_handle(path)
    assert back.fingerprint == h.fingerprint
    np.testing.assert_array_equal(predict_maps(h, [tiny_data[0].record]), predict_maps(back, [tiny_data[0].record]))
    with pytest.raises(MissingDependencyError):
        load_handle(tmp_path / "nope.pt")


# ----------------------------------------------------------------- Siamese


def test_siamese_embedding_lengths():
    compact = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4))
    full = build_siamese(SiameseConfig("full_map", input_size=32, depth=2, base_filters=4))
    x = torch.randn(3, 1, 32, 32)
    s, ea, eb = compact.module.eval()(x, x)
    assert ea.shape == (3, 128) and s.shape == (3,)
    _, fa, _ = full.module.eval()(x, x)
    assert fa.shape == (3, 32 * 32)
    assert full.module.branch.feature_map(x).shape == (3, 1, 32, 32)


@pytest.mark.slow
def test_siamese_full_map_at_512():
    h = build_siamese(SiameseConfig("full_map", input_size=512, depth=4, base_filters=2))
    with torch.no_grad():
        assert h.module.eval().branch.feature_map(torch.zeros(1, 1, 512, 512)).shape == (1, 1, 512, 512)


@pytest.mark.parametrize("kw", [{"variant": "triplet"}, {"fusion": "sum"}, {"bce_weight": -1}, {"input_size": 30}])
def test_siamese_config_errors(kw):
    with pytest.raises(ConfigError):
        build_siamese(SiameseConfig(**kw))


@pytest.mark.parametrize("variant", ["compact_embedding", "full_map"])
def test_siamese_swap_invariance_and_tying(variant, tiny_data):
    h = build_siamese(SiameseConfig(variant, input_size=32, depth=2, base_filters=4))
    pairs = make_pairs([s.record for s in tiny_data], 8, seed=0)
    train_siamese(h, pairs, ContrastiveParams(normalize=True), TrainConfig(epochs=1, batch_size=4))
    # one branch module serves both inputs, so tying holds by construction
    assert len({id(m) for m in [h.module.branch]}) == 1
    x, y = torch.randn(2, 1, 32, 32), torch.randn(2, 1, 32, 32)
    h.module.eval()
    s1, a1, b1 = h.module(x, y)
    s2, a2, b2 = h.module(y, x)
    torch.testing.assert_close(s1, s2)
    torch.testing.assert_close(a1, b2)


def test_siamese_concat_fusion_is_order_sensitive():
    h = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4, fusion="concat"), seed=4)
    x, y = torch.randn(2, 1, 32, 32), torch.randn(2, 1, 32, 32)
    h.module.eval()
    assert not torch.allclose(h.module(x, y)[0], h.module(y, x)[0])


def test_bce_only_objective_matches_oracle(tiny_data):
    h = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4, contrastive_weight=0.0))
    pairs = make_pairs([s.record for s in tiny_data], 6, seed=0)
    from cxr_anomaly.models.training import _pair_tensors

    a, b, y = _pair_tensors(pairs)
    h.module.eval()
    loss, score = siamese_objective(h, a, b, y, ContrastiveParams())
    s = score.detach().double().clamp(1e-7, 1 - 1e-7)
    oracle = -(y * torch.log(s) + (1 - y) * torch.log(1 - s)).mean()
    assert loss.item() == pytest.approx(oracle.item(), rel=1e-5)


def test_siamese_single_class_pairs_rejected(tiny_data):
    h = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4))
    pairs = [p for p in make_pairs([s.record for s in tiny_data], 10, seed=0) if p.label == 1]
    with pytest.raises(DataError):
        train_siamese(h, pairs, ContrastiveParams(), TrainConfig(epochs=1))


def test_identical_pair_scores_similar_after_training(tiny_data):
    h = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4))
    pairs = make_pairs([s.record for s in tiny_data], 40, seed=0)
    train_siamese(h, pairs, ContrastiveParams(normalize=True), TrainConfig(epochs=8, batch_size=8))
    x = torch.from_numpy(tiny_data[0].record.pixels)[None, None]
    assert h.module.eval()(x, x)[0].item() > 0.5


# ----------------------------------------------------------------- CheX-Nomaly


@pytest.mark.parametrize("variant", ["full_map", "compact_embedding"])
def test_chexnomaly_freeze_contract(variant, tiny_data):
    sia = build_siamese(SiameseConfig(variant, input_size=32, depth=2, base_filters=4))
    data = [(s.record, s.mask) for s in tiny_data[:8]]
    h = assemble_chexnomaly(sia, UNetConfig(32, 2, 4), TrainConfig(epochs=3, batch_size=4), data)
    assert h.frozen
    state = h.module.state_dict()
    sia_state = sia.module.branch.state_dict()
    for name in h.frozen:
        assert torch.equal(state[name], sia_state[name.removeprefix("extractor.")])
    out = predict_maps(h, [s.record for s in tiny_data[:2]])
    assert out.shape == (2, 32, 32)


def test_chexnomaly_variant_mismatch():
    sia = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4))
    with pytest.raises(ConfigError):
        build_chexnomaly(sia, UNetConfig(32, 2, 4), variant="full_map")
    with pytest.raises(ConfigError):
        build_chexnomaly(build_unet(UNetConfig(32, 2, 4)), UNetConfig(32, 2, 4))


def test_chexnomaly_resizes_branch_output():
    sia = build_siamese(SiameseConfig("full_map", input_size=32, depth=2, base_filters=4))
    h = build_chexnomaly(sia, UNetConfig(64, 3, 4))
    with torch.no_grad():
        assert h.module.eval()(torch.zeros(2, 1, 64, 64)).shape == (2, 1, 64, 64)


def test_chexnomaly_init_from_reproduces_supermodel(tiny_data):
    sup = build_unet(UNetConfig(32, 2, 4), seed=9)
    sia = build_siamese(SiameseConfig("full_map", input_size=32, depth=2, base_filters=4))
    from cxr_anomaly.models.training import _transplant_unet

    h = build_chexnomaly(sia, UNetConfig(32, 2, 4))
    _transplant_unet(sup, h)
    recs = [s.record for s in tiny_data[:3]]
    np.testing.assert_allclose(predict_maps(h, recs), predict_maps(sup, recs), atol=1e-6)


def test_chexnomaly_checkpoint_roundtrip(tmp_path, tiny_data):
    sia = build_siamese(SiameseConfig("compact_embedding", input_size=32, depth=2, base_filters=4))
    h = build_chexnomaly(sia, UNetConfig(32, 2, 4))
    back = load_handle(save_handle(h, tmp_path, "chex"))
    assert back.frozen == h.frozen
    recs = [s.record for s in tiny_data[:2]]
    np.testing.assert_array_equal(predict_maps(h, recs), predict_maps(back, recs))


def test_fusion_net_shape():
    h = build_fusion(5)
    out = h.module(torch.rand(2, 5, 8, 8))
    assert out.shape == (2, 1, 8, 8)
    with pytest.raises(ConfigError):
        build_fusion(0)
