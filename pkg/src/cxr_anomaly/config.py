"""Experiment configuration: one YAML document, nested sections, env overrides.

Any key can be overridden from the environment as
``CXR_ANOMALY__<SECTION>__<KEY>=value`` (nested sections add more ``__``
parts); values are parsed as YAML scalars, so ``5``, ``0.1``, ``true`` and
``null`` keep their types.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data.types import SyntheticSpec
from .errors import ConfigError
from .losses import ContrastiveParams, FocalParams
from .metrics import EvalConfig
from .models import SegLossConfig, SiameseConfig, TrainConfig, UNetConfig

ENV_PREFIX = "CXR_ANOMALY__"
FAMILIES = ("specialized", "supermodel", "siamese", "chexnomaly", "model_ensemble")


@dataclass
class SyntheticSection:
    n_images: int = 300
    image_size: int = 64
    n_classes: int = 5
    held_out_class: int = 4
    anomalies_per_image: tuple[int, int] = (1, 2)
    box_size: tuple[int, int] = (6, 16)
    texture_seed: int = 0
    positive_fraction: float | None = 0.5

    def spec(self, unet_depth: int) -> SyntheticSpec:
        return SyntheticSpec(
            n_images=self.n_images,
            image_size=self.image_size,
            n_classes=self.n_classes,
            held_out_class=self.held_out_class,
            anomalies_per_image=tuple(self.anomalies_per_image),
            box_size=tuple(self.box_size),
            texture_seed=self.texture_seed,
            unet_depth=unet_depth,
            positive_fraction=self.positive_fraction,
        )


@dataclass
class DatasetSection:
    # Dataset directory; empty means <run-dir>/data.
    path: str = ""
    source: str = "synthetic"
    # Real-data ingestion inputs.
    annotations: str = ""
    dicom_dir: str = ""
    image_size: int = 512
    # Real data only: class id kept out of train/val and evaluated as "unseen".
    held_out_class: int | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    unseen_ratio: tuple[int, int] = (4, 10)
    train_pairs: int = 400
    val_pairs: int = 100
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class ModelSection:
    family: str = "supermodel"
    unet: dict = field(default_factory=lambda: {"depth": 4, "base_filters": 8, "attention": False})
    siamese: dict = field(default_factory=lambda: {"variant": "full_map", "depth": 4, "base_filters": 8})
    # Checkpoint of a trained Siamese model; empty means <run-dir>/checkpoints/siamese.pt.
    siamese_checkpoint: str = ""
    # Start CheX-Nomaly's segmentation weights from the run's supermodel checkpoint.
    init_from_supermodel: bool = True
    fusion_width: int = 16


@dataclass
class LossSection:
    alpha: float = 0.25
    gamma: float = 2.0
    epsilon: float = 1e-7
    # null: plain focal; a number p >= 1: focal on the p-norm rectangularized map.
    sharpness: float | str | None = None
    # The fusion network of the model ensemble trains on the rectangularized map.
    ensemble_sharpness: float | str | None = 8.0
    margin: float = 1.0
    normalize_embeddings: bool = True


@dataclass
class TrainingSection:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    patience: int = 5
    min_delta: float = 0.0
    hflip: bool = False
    intensity_jitter: float = 0.0
    siamese_epochs: int = 12
    siamese_learning_rate: float = 1e-3


@dataclass
class EvalSection:
    threshold: float = 0.5
    tp_diff_threshold: int | None = None
    iou_threshold: float = 0.4
    mae_on: str = "probability"
    bucket_width: float = 0.5
    outlier_threshold: float = 4.0
    rect_postprocess: bool = False
    sets: tuple[str, ...] = ("test", "unseen")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------ derived objects

    @property
    def image_size(self) -> int:
        if self.dataset.source == "synthetic":
            return self.dataset.synthetic.image_size
        return self.dataset.image_size

    def unet_config(self, size: int | None = None) -> UNetConfig:
        try:
            return UNetConfig(input_size=size or self.image_size, **self.model.unet)
        except TypeError as exc:
            raise ConfigError(f"model.unet: {exc}") from None

    def siamese_config(self, size: int | None = None) -> SiameseConfig:
        try:
            return SiameseConfig(input_size=size or self.image_size, **self.model.siamese)
        except TypeError as exc:
            raise ConfigError(f"model.siamese: {exc}") from None

    def synthetic_spec(self) -> SyntheticSpec:
        return self.dataset.synthetic.spec(self.model.unet.get("depth", 4))

    def train_config(self, siamese: bool = False) -> TrainConfig:
        t = self.training
        return TrainConfig(
            epochs=t.siamese_epochs if siamese else t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.siamese_learning_rate if siamese else t.learning_rate,
            seed=self.seed,
            patience=t.patience,
            min_delta=t.min_delta,
            hflip=t.hflip,
            intensity_jitter=t.intensity_jitter,
        )

    def seg_loss(self, ensemble: bool = False) -> SegLossConfig:
        sharp = self.loss.ensemble_sharpness if ensemble else self.loss.sharpness
        return SegLossConfig(self.loss.alpha, self.loss.gamma, self.loss.epsilon, sharp)

    def contrastive(self) -> ContrastiveParams:
        return ContrastiveParams(self.loss.margin, self.loss.normalize_embeddings)

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(e.threshold, e.tp_diff_threshold, e.iou_threshold, e.mae_on, e.bucket_width,
                          e.outlier_threshold, e.rect_postprocess)

    def validate(self) -> None:
        if self.model.family not in FAMILIES:
            raise ConfigError(f"model.family must be one of {FAMILIES}, got {self.model.family!r}")
        if self.dataset.source not in ("synthetic", "vindr"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'vindr', got {self.dataset.source!r}")
        if self.dataset.source == "synthetic":
            self.synthetic_spec().validate()
        ratios = self.dataset.split_ratios
        if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
            raise ConfigError(f"dataset.split_ratios must be three positive numbers summing to 1, got {ratios}")
        sharp = self.loss.sharpness
        if sharp is not None and sharp != "exact" and (not isinstance(sharp, (int, float)) or sharp < 1):
            raise ConfigError(f"loss.sharpness must be null, 'exact' or a number >= 1, got {sharp!r}")
        try:
            FocalParams(self.loss.alpha, self.loss.gamma, self.loss.epsilon)
            self.contrastive()
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from None
        self.unet_config().validate()
        self.siamese_config().validate()
        self.train_config().validate()
        self.train_config(siamese=True).validate()
        self.eval_config().validate()
        unknown = set(self.eval.sets) - {"train", "val", "test", "unseen"}
        if unknown:
            raise ConfigError(f"eval.sets has unknown split names {sorted(unknown)}")

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml())
        return path

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "ExperimentConfig":
        return _build(cls, data or {}, "")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{where}{name}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read a config file (or defaults when ``path`` is None) and apply env overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    data = apply_env_overrides(data, os.environ if env is None else env)
    return ExperimentConfig.from_dict(data)


def apply_env_overrides(data: dict, env: Mapping[str, str]) -> dict:
    data = _plain(dict(data))
    for key in sorted(env):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX) :].split("__") if p]
        if not parts:
            continue
        try:
            value = yaml.safe_load(env[key])
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse value {env[key]!r}: {exc}") from None
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a section")
        node[parts[-1]] = value
    return data
