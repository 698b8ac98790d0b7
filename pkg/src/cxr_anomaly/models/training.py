"""Training loops, transfer assembly and inference for every model family."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..data.types import ImageRecord, PairSample
from ..errors import ConfigError, DataError, TrainingError
from ..losses import ContrastiveParams, FocalParams, Sharpness, contrastive_loss, focal_loss, rect_focal_loss, rect_transform
from .handle import ModelHandle, build_chexnomaly
from .unet import UNetConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 5
    min_delta: float = 0.0
    checkpoint_dir: str | None = None
    hflip: bool = False
    intensity_jitter: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SegLossConfig:
    """Focal loss, optionally on the rectangularized prediction.

    ``sharpness=None`` (the default) trains on the raw map with plain focal
    loss; a finite sharpness trains on ``rect_transform(pred)`` instead. At desk
    scale the rectangularized objective converged far more slowly for U-Nets, so
    it is opt-in there and exact rectangularization is offered at inference.
    """

    alpha: float = 0.25
    gamma: float = 2.0
    epsilon: float = 1e-7
    sharpness: Sharpness | None = None

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.alpha, self.gamma, self.epsilon)

    def __call__(self, target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
        if self.sharpness is None:
            return focal_loss(target, pred, self.focal)
        return rect_focal_loss(target, pred, self.focal, self.sharpness)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- tensors


def _as_image(x) -> np.ndarray:
    return x.pixels if isinstance(x, ImageRecord) else np.asarray(x, dtype=np.float32)


def stack_inputs(items: Sequence) -> torch.Tensor:
    """(N, C, S, S) float32 tensor from records, (S, S) arrays or (C, S, S) arrays."""
    arrs = [_as_image(x) for x in items]
    t = torch.from_numpy(np.stack(arrs).astype(np.float32))
    return t.unsqueeze(1) if t.ndim == 3 else t


def _stack_targets(masks: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(m, dtype=np.float32) for m in masks]))


def _check_size(handle: ModelHandle, x: torch.Tensor) -> None:
    size = handle.input_size
    if size is not None and tuple(x.shape[-2:]) != (size, size):
        raise DataError(f"input spatial shape {tuple(x.shape[-2:])} does not match model input {size}x{size}")


def _augment(x: torch.Tensor, y: torch.Tensor | None, tc: TrainConfig, gen: torch.Generator):
    if tc.hflip:
        flip = torch.rand(x.shape[0], generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        if y is not None:
            y = torch.where(flip[:, None, None], y.flip(-1), y)
    if tc.intensity_jitter > 0:
        scale = 1 + tc.intensity_jitter * (2 * torch.rand(x.shape[0], 1, 1, 1, generator=gen) - 1)
        x = (x * scale).clamp(0, 1)
    return x, y


def _check_finite(loss: torch.Tensor, epoch: int, batch: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{what}: non-finite loss {loss.item()} at epoch {epoch + 1}, batch {batch}")


class _EarlyStopper:
    def __init__(self, module: torch.nn.Module, patience: int, min_delta: float):
        self.module = module
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.best_state = copy.deepcopy(module.state_dict())
        self.wait = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record a validation value; returns True when training should stop."""
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            self.best_state = copy.deepcopy(self.module.state_dict())
            return False
        self.wait += 1
        return self.wait >= self.patience

    def restore(self) -> None:
        self.module.load_state_dict(self.best_state)


# ---------------------------------------------------------------- segmentation


def _eval_seg_loss(module, x, y, loss_cfg: SegLossConfig, batch_size: int) -> float:
    module.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out = module(x[i : i + batch_size])[:, 0]
            total += loss_cfg(y[i : i + batch_size], out).item() * out.shape[0]
    return total / x.shape[0]


def train_segmentation(
    model: ModelHandle,
    data: Sequence[tuple],
    loss: SegLossConfig = SegLossConfig(),
    tc: TrainConfig = TrainConfig(),
    val_data: Sequence[tuple] | None = None,
) -> tuple[ModelHandle, dict]:
    """Fit ``model`` on (input, mask) pairs; returns the best-validation weights.

    Inputs may be records, (S, S) arrays or (C, S, S) stacks. Without
    ``val_data`` the final epoch's weights are kept. ``history["train_loss"]``
    holds the mean batch loss of each epoch.
    """
    tc.validate()
    if not data:
        raise DataError("training data is empty")
    x = stack_inputs([d[0] for d in data])
    y = _stack_targets([d[1] for d in data])
    _check_size(model, x)
    if tuple(y.shape[-2:]) != tuple(x.shape[-2:]):
        raise DataError("mask and image shapes differ")
    xv = yv = None
    if val_data:
        xv = stack_inputs([d[0] for d in val_data])
        yv = _stack_targets([d[1] for d in val_data])

    module = model.module
    torch.manual_seed(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    params = [p for p in module.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=tc.learning_rate)
    stopper = _EarlyStopper(module, tc.patience, tc.min_delta)
    history: dict = {"train_loss": [], "val_loss": []}

    for epoch in range(tc.epochs):
        module.train()
        perm = torch.randperm(x.shape[0], generator=gen)
        total = 0.0
        for b, i in enumerate(range(0, x.shape[0], tc.batch_size)):
            idx = perm[i : i + tc.batch_size]
            if idx.numel() == 1 and x.shape[0] > 1:
                continue  # a lone sample breaks batch-norm statistics
            xb, yb = _augment(x[idx], y[idx], tc, gen)
            opt.zero_grad()
            batch_loss = loss(yb, module(xb)[:, 0])
            _check_finite(batch_loss, epoch, b, "segmentation")
            batch_loss.backward()
            opt.step()
            total += batch_loss.item() * idx.numel()
        history["train_loss"].append(total / x.shape[0])
        if xv is not None:
            v = _eval_seg_loss(module, xv, yv, loss, tc.batch_size)
            history["val_loss"].append(v)
            log.info("epoch %d train %.5f val %.5f", epoch + 1, history["train_loss"][-1], v)
            if stopper.update(v, epoch):
                break
        else:
            log.info("epoch %d train %.5f", epoch + 1, history["train_loss"][-1])

    if xv is not None:
        stopper.restore()
        history["best_epoch"] = stopper.best_epoch + 1
    history["epochs_run"] = len(history["train_loss"])
    module.eval()
    model.history = history
    return model, history


# ---------------------------------------------------------------- siamese


def _pair_tensors(pairs: Sequence[PairSample]):
    a = stack_inputs([p.image_a for p in pairs])
    b = stack_inputs([p.image_b for p in pairs])
    y = torch.tensor([float(p.label) for p in pairs])
    return a, b, y


def siamese_objective(model: ModelHandle, a, b, y, cp: ContrastiveParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted BCE on the head score plus contrastive loss on the branch embeddings."""
    cfg = model.config
    score, ea, eb = model.module(a, b)
    total = cfg["bce_weight"] * F.binary_cross_entropy(score.clamp(1e-7, 1 - 1e-7), y)
    if cfg["contrastive_weight"] > 0:
        total = total + cfg["contrastive_weight"] * contrastive_loss(ea, eb, y, cp)
    return total, score


def evaluate_pairs(model: ModelHandle, pairs: Sequence[PairSample], cp: ContrastiveParams = ContrastiveParams(),
                   batch_size: int = 16) -> dict:
    a, b, y = _pair_tensors(pairs)
    module = model.module
    module.eval()
    total, correct, scores = 0.0, 0, []
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            loss, score = siamese_objective(model, a[i : i + batch_size], b[i : i + batch_size], y[i : i + batch_size], cp)
            total += loss.item() * score.shape[0]
            correct += int(((score >= 0.5).float() == y[i : i + batch_size]).sum())
            scores.append(score)
    return {"loss": total / len(pairs), "accuracy": correct / len(pairs), "scores": torch.cat(scores).numpy()}


def train_siamese(
    model: ModelHandle,
    pairs: Sequence[PairSample],
    cp: ContrastiveParams = ContrastiveParams(),
    tc: TrainConfig = TrainConfig(),
    val_pairs: Sequence[PairSample] | None = None,
) -> tuple[ModelHandle, dict]:
    tc.validate()
    if model.kind != "siamese":
        raise ConfigError(f"train_siamese needs a siamese handle, got {model.kind!r}")
    if not pairs:
        raise DataError("pair set is empty")
    labels = {p.label for p in pairs}
    if labels != {0, 1}:
        raise DataError(f"pair set must contain both labels, got only {sorted(labels)}")
    a, b, y = _pair_tensors(pairs)
    _check_size(model, a)

    module = model.module
    torch.manual_seed(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    opt = torch.optim.Adam([p for p in module.parameters() if p.requires_grad], lr=tc.learning_rate)
    stopper = _EarlyStopper(module, tc.patience, tc.min_delta)
    history: dict = {"train_loss": [], "train_accuracy": [], "val_loss": [], "val_accuracy": []}

    for epoch in range(tc.epochs):
        module.train()
        perm = torch.randperm(len(pairs), generator=gen)
        total, correct = 0.0, 0
        for bi, i in enumerate(range(0, len(pairs), tc.batch_size)):
            idx = perm[i : i + tc.batch_size]
            xa, _ = _augment(a[idx], None, tc, gen)
            xb, _ = _augment(b[idx], None, tc, gen)
            opt.zero_grad()
            loss, score = siamese_objective(model, xa, xb, y[idx], cp)
            _check_finite(loss, epoch, bi, "siamese")
            loss.backward()
            opt.step()
            total += loss.item() * idx.numel()
            correct += int(((score.detach() >= 0.5).float() == y[idx]).sum())
        history["train_loss"].append(total / len(pairs))
        history["train_accuracy"].append(correct / len(pairs))
        if val_pairs:
            ev = evaluate_pairs(model, val_pairs, cp, tc.batch_size)
            history["val_loss"].append(ev["loss"])
            history["val_accuracy"].append(ev["accuracy"])
            log.info("epoch %d loss %.4f acc %.3f val_acc %.3f", epoch + 1, history["train_loss"][-1],
                     history["train_accuracy"][-1], ev["accuracy"])
            if stopper.update(ev["loss"], epoch):
                break

    if val_pairs:
        stopper.restore()
        history["best_epoch"] = stopper.best_epoch + 1
    history["epochs_run"] = len(history["train_loss"])
    module.eval()
    model.history = history
    return model, history


# ---------------------------------------------------------------- transfer assembly


def assemble_chexnomaly(
    siamese: ModelHandle,
    unet_cfg: UNetConfig,
    tc: TrainConfig,
    data: Sequence[tuple],
    loss: SegLossConfig = SegLossConfig(),
    val_data: Sequence[tuple] | None = None,
    variant: str | None = None,
    init_from: ModelHandle | None = None,
) -> ModelHandle:
    """Freeze a trained Siamese branch, fuse it into a U-Net and fine-tune on single images.

    ``init_from`` (a trained plain U-Net of the same shape) seeds the segmentation
    weights; the image-channel filters are copied and the extra feature channel
    starts at zero, so fine-tuning begins from that network's predictions.
    """
    handle = build_chexnomaly(siamese, unet_cfg, variant=variant, seed=tc.seed)
    if init_from is not None:
        _transplant_unet(init_from, handle)
    before = handle.frozen_state()
    handle, history = train_segmentation(handle, data, loss, tc, val_data)
    after = handle.frozen_state()
    changed = [k for k in before if not torch.equal(before[k], after[k])]
    if changed:
        raise TrainingError(f"frozen parameters changed during fine-tuning: {changed[:5]}")
    return handle


def _transplant_unet(source: ModelHandle, target: ModelHandle) -> None:
    if source.kind != "unet":
        raise ConfigError("init_from must be a plain U-Net handle")
    src = source.module.state_dict()
    dst_module = target.module.unet
    dst = dst_module.state_dict()
    for k, v in src.items():
        if k not in dst:
            raise ConfigError(f"init_from U-Net has unexpected tensor {k}")
        if dst[k].shape == v.shape:
            dst[k] = v.clone()
        elif v.ndim == 4 and dst[k].shape[0] == v.shape[0] and dst[k].shape[2:] == v.shape[2:]:
            # first encoder / bottleneck conv: image channels copied, fused channels zeroed
            w = torch.zeros_like(dst[k])
            w[:, : v.shape[1]] = v
            dst[k] = w
        else:
            raise ConfigError(f"init_from U-Net tensor {k} has incompatible shape {tuple(v.shape)}")
    dst_module.load_state_dict(dst)


# ---------------------------------------------------------------- inference


def predict_maps(model: ModelHandle, images: Sequence, batch_size: int = 16) -> np.ndarray:
    """Probability maps (N, S, S) for records or arrays."""
    x = stack_inputs(images)
    _check_size(model, x)
    module = model.module
    module.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(module(x[i : i + batch_size])[:, 0])
    return torch.cat(outs).numpy().astype(np.float32)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def postprocess(prob: np.ndarray, rect: bool = False) -> np.ndarray:
    if not rect:
        return prob
    return rect_transform(torch.from_numpy(np.asarray(prob, dtype=np.float64)), "exact").numpy().astype(np.float32)


def predict_mask(
    model: ModelHandle, image, threshold: float = 0.5, rect_postprocess: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """(probability map, binary mask) for one image; the mask thresholds the returned map."""
    prob = postprocess(predict_maps(model, [image])[0], rect_postprocess)
    return prob, binarize(prob, threshold)
