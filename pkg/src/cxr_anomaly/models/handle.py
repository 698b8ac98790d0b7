"""Model handles: a built network plus the metadata needed to rebuild and audit it."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from ..errors import ConfigError, MissingDependencyError
from .chexnomaly import CheXNomaly
from .siamese import SiameseConfig, SiameseNet
from .unet import UNet, UNetConfig

KINDS = ("unet", "siamese", "chexnomaly", "fusion")


class FusionNet(nn.Module):
    """Three conv layers mapping K stacked prediction maps to one fused map."""

    def __init__(self, n_inputs: int, width: int = 16):
        super().__init__()
        self.n_inputs = n_inputs
        self.body = nn.Sequential(
            nn.Conv2d(n_inputs, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(x))


@dataclass
class ModelHandle:
    module: nn.Module
    kind: str
    config: dict
    frozen: frozenset[str] = field(default_factory=frozenset)
    history: dict = field(default_factory=dict, repr=False)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps({"kind": self.kind, "config": self.config}, sort_keys=True) + repr(self.module)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    @property
    def input_size(self) -> int:
        cfg = self.config
        if self.kind == "chexnomaly":
            return cfg["unet"]["input_size"]
        return cfg.get("input_size") or cfg.get("unet", {}).get("input_size")

    def frozen_state(self) -> dict[str, torch.Tensor]:
        state = self.module.state_dict()
        return {k: state[k].detach().clone() for k in sorted(self.frozen)}

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "parameter_count": self.parameter_count,
            "frozen": sorted(self.frozen),
        }


def _seeded(seed: int | None):
    return torch.random.fork_rng(devices=[]) if seed is not None else _Null()


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def build_unet(config: UNetConfig, seed: int | None = 0) -> ModelHandle:
    config.validate()
    with _seeded(seed):
        if seed is not None:
            torch.manual_seed(seed)
        module = UNet(config)
    return ModelHandle(module, "unet", config.to_dict())


def build_siamese(config: SiameseConfig, seed: int | None = 0) -> ModelHandle:
    config.validate()
    with _seeded(seed):
        if seed is not None:
            torch.manual_seed(seed)
        module = SiameseNet(config)
    return ModelHandle(module, "siamese", config.to_dict())


def build_fusion(n_inputs: int, width: int = 16, seed: int | None = 0) -> ModelHandle:
    if n_inputs < 1:
        raise ConfigError("fusion net needs at least one input channel")
    with _seeded(seed):
        if seed is not None:
            torch.manual_seed(seed)
        module = FusionNet(n_inputs, width)
    return ModelHandle(module, "fusion", {"n_inputs": n_inputs, "width": width})


def build_chexnomaly(
    siamese: ModelHandle,
    unet_config: UNetConfig,
    variant: str | None = None,
    seed: int | None = 0,
) -> ModelHandle:
    """Wrap a trained Siamese handle's branch (frozen) around a fresh U-Net."""
    if siamese.kind != "siamese":
        raise ConfigError(f"expected a siamese model handle, got {siamese.kind!r}")
    s_cfg = SiameseConfig(**siamese.config)
    if variant is not None and variant != s_cfg.variant:
        raise ConfigError(
            f"fusion config expects a {variant!r} Siamese but the checkpoint "
            f"(fingerprint {siamese.fingerprint}) is {s_cfg.variant!r}"
        )
    unet_config.validate()
    with _seeded(seed):
        if seed is not None:
            torch.manual_seed(seed)
        module = CheXNomaly(s_cfg, unet_config, branch=siamese.module.branch)
    config = {"siamese": s_cfg.to_dict(), "unet": unet_config.to_dict(), "siamese_fingerprint": siamese.fingerprint}
    return ModelHandle(module, "chexnomaly", config, frozenset(module.frozen_parameter_names()))


def rebuild(kind: str, config: dict) -> ModelHandle:
    if kind == "unet":
        return build_unet(UNetConfig(**config), seed=None)
    if kind == "siamese":
        return build_siamese(SiameseConfig(**config), seed=None)
    if kind == "fusion":
        return build_fusion(config["n_inputs"], config["width"], seed=None)
    if kind == "chexnomaly":
        s_cfg = SiameseConfig(**config["siamese"])
        module = CheXNomaly(s_cfg, UNetConfig(**config["unet"]))
        return ModelHandle(module, "chexnomaly", config, frozenset(module.frozen_parameter_names()))
    raise ConfigError(f"unknown model kind {kind!r}")


def save_handle(handle: ModelHandle, directory: str | Path, name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.pt"
    torch.save(handle.module.state_dict(), path)
    (directory / f"{name}.json").write_text(json.dumps(handle.metadata(), indent=2, sort_keys=True) + "\n")
    return path


def load_handle(path: str | Path) -> ModelHandle:
    path = Path(path)
    if path.suffix != ".pt":
        path = path.with_suffix(".pt")
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise MissingDependencyError(f"checkpoint {path} (or its .json sidecar) not found")
    meta = json.loads(sidecar.read_text())
    handle = rebuild(meta["kind"], meta["config"])
    handle.module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    if handle.fingerprint != meta["fingerprint"]:
        raise ConfigError(f"{path}: architecture fingerprint mismatch ({handle.fingerprint} != {meta['fingerprint']})")
    handle.module.eval()
    return handle
