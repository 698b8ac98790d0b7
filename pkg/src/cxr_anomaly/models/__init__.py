from .chexnomaly import CheXNomaly
from .handle import (
    FusionNet,
    ModelHandle,
    build_chexnomaly,
    build_fusion,
    build_siamese,
    build_unet,
    load_handle,
    rebuild,
    save_handle,
)
from .siamese import SiameseConfig, SiameseNet
from .training import (
    SegLossConfig,
    TrainConfig,
    assemble_chexnomaly,
    binarize,
    evaluate_pairs,
    predict_mask,
    predict_maps,
    train_segmentation,
    train_siamese,
)
from .unet import AttentionGate, UNet, UNetConfig

__all__ = [
    "AttentionGate",
    "CheXNomaly",
    "FusionNet",
    "ModelHandle",
    "SegLossConfig",
    "SiameseConfig",
    "SiameseNet",
    "TrainConfig",
    "UNet",
    "UNetConfig",
    "assemble_chexnomaly",
    "binarize",
    "build_chexnomaly",
    "build_fusion",
    "build_siamese",
    "build_unet",
    "evaluate_pairs",
    "load_handle",
    "predict_mask",
    "predict_maps",
    "rebuild",
    "save_handle",
    "train_segmentation",
    "train_siamese",
]
