"""Level-specific predictors, the architecture registry and checkpoint I/O.

Predictor input/output contract:

=====  ======================  =====================
level  input                   output
=====  ======================  =====================
clip   ``(N, 1, L, H, W)``     ``(N,)`` in [0, 1]
frame  ``(N, 1, H, W)``        ``(N,)`` in [0, 1]
pixel  ``(N, 1, H, W)``        ``(N, H, W)`` in [0, 1]
=====  ======================  =====================
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractMismatchError, IntegrityError, RegistryError

LEVELS = ("clip", "frame", "pixel")

_REGISTRY: dict[str, dict[str, Callable[..., nn.Module]]] = {lvl: {} for lvl in LEVELS}

# names of the full-scale backbones; they need an externally registered builder
RESERVED = {
    "clip": ["resnet3d_18", "resnet2plus1d_18", "unet3d_encoder"],
    "frame": ["resnet18", "densenet121", "efficientnet_b0", "vit_tiny", "vgg16", "stn_cnn", "mobilenet_v2"],
    "pixel": ["unet", "resnet18_unet", "resnet18_deeplabv3plus", "densenet121_unet",
              "efficientnet_b0_unet", "efficientnet_b0_deeplabv3plus"],
}


def register_architecture(level: str, name: str):
    """Decorator registering a module factory ``factory(**config) -> nn.Module``."""
    if level not in LEVELS:
        raise RegistryError(f"unknown level {level!r}; expected one of {LEVELS}")

    def deco(factory):
        _REGISTRY[level][name] = factory
        return factory

    return deco


def available(level: str) -> list[str]:
    return sorted(_REGISTRY.get(level, {}))


def _conv_bn(cin, cout, dims=2):
    conv, bn = (nn.Conv2d, nn.BatchNorm2d) if dims == 2 else (nn.Conv3d, nn.BatchNorm3d)
    return nn.Sequential(conv(cin, cout, 3, padding=1, bias=False), bn(cout), nn.ReLU(inplace=True))


class ChannelReplicate(nn.Module):
    """Copies a single grayscale channel to ``n`` channels (applied once, at the input)."""

    def __init__(self, n: int):
        super().__init__()
        self.n = n

    def forward(self, x):
        return x.expand(x.shape[0], self.n, *x.shape[2:]) if self.n > 1 else x


@register_architecture("frame", "tiny_frame_cnn")
class TinyFrameCNN(nn.Module):
    """Four conv stages, global average+max pooling, sigmoid head."""

    def __init__(self, in_channels: int = 1, width: int = 16):
        super().__init__()
        w = width
        self.replicate = ChannelReplicate(in_channels)
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, w, 4, stride=4), nn.ReLU(inplace=True),
            _conv_bn(w, 2 * w), nn.MaxPool2d(2),
            _conv_bn(2 * w, 4 * w), nn.MaxPool2d(2),
            _conv_bn(4 * w, 8 * w),
        )
        self.head = nn.Linear(16 * w, 1)

    def forward(self, x):
        f = self.features(self.replicate(x))
        pooled = torch.cat([f.mean(dim=(2, 3)), f.amax(dim=(2, 3))], dim=1)
        return torch.sigmoid(self.head(pooled)).squeeze(1)


@register_architecture("pixel", "tiny_pixel_unet")
class TinyPixelUNet(nn.Module):
    """Three-scale encoder-decoder with skip connections.

    A 4x4/4 patch stem keeps the desk-scale cost low; logits are upsampled
    bilinearly so the output grid matches the input grid exactly.
    """

    def __init__(self, in_channels: int = 1, widths: tuple[int, int, int] = (16, 32, 96),
                 head_prior: float = 1e-4):
        super().__init__()
        a, b, c = widths
        self.head_prior = head_prior
        self.replicate = ChannelReplicate(in_channels)
        self.stem = nn.Sequential(nn.Conv2d(in_channels, a, 4, stride=4), nn.ReLU(inplace=True))
        self.enc1 = nn.Sequential(_conv_bn(a, a), _conv_bn(a, a))
        self.enc2 = nn.Sequential(_conv_bn(a, b), _conv_bn(b, b))
        self.enc3 = nn.Sequential(_conv_bn(b, c), _conv_bn(c, c))
        self.dec2 = nn.Sequential(_conv_bn(c + b, b), _conv_bn(b, b))
        self.dec1 = nn.Sequential(_conv_bn(b + a, a), _conv_bn(a, a))
        self.head = nn.Conv2d(a, 1, 1)

    def reset_head(self) -> None:
        # start with a near-empty map: on frames without origins the Dice term
        # only has a usable gradient while the summed background stays small
        p = self.head_prior
        nn.init.zeros_(self.head.weight)
        nn.init.constant_(self.head.bias, math.log(p / (1 - p)))

    def forward(self, x):
        size = x.shape[-2:]
        e1 = self.enc1(self.stem(self.replicate(x)))
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:]), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:]), e1], dim=1))
        logits = F.interpolate(self.head(d1), size=size, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits).squeeze(1)


@register_architecture("clip", "tiny_clip_cnn3d")
class TinyClipCNN3D(nn.Module):
    def __init__(self, in_channels: int = 1, width: int = 16):
        super().__init__()
        w = width
        self.replicate = ChannelReplicate(in_channels)
        self.features = nn.Sequential(
            nn.Conv3d(in_channels, w, (3, 4, 4), stride=(1, 4, 4), padding=(1, 0, 0)), nn.ReLU(inplace=True),
            _conv_bn(w, 2 * w, dims=3), nn.MaxPool3d(2),
            _conv_bn(2 * w, 4 * w, dims=3), nn.MaxPool3d(2),
            _conv_bn(4 * w, 8 * w, dims=3),
        )
        self.head = nn.Linear(16 * w, 1)

    def forward(self, x):
        f = self.features(self.replicate(x))
        pooled = torch.cat([f.mean(dim=(2, 3, 4)), f.amax(dim=(2, 3, 4))], dim=1)
        return torch.sigmoid(self.head(pooled)).squeeze(1)


def _init_weights(model: nn.Module, generator: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_model(level: str, arch_name: str, config: dict | None = None, init_seed: int = 0) -> nn.Module:
    if level not in LEVELS:
        raise RegistryError(f"unknown level {level!r}; expected one of {LEVELS}")
    factory = _REGISTRY[level].get(arch_name)
    if factory is None:
        hint = " (reserved: register a plug-in builder first)" if arch_name in RESERVED[level] else ""
        raise RegistryError(
            f"unknown {level}-level architecture {arch_name!r}{hint}; available: {', '.join(available(level))}"
        )
    config = dict(config or {})
    gen = torch.Generator().manual_seed(int(init_seed))
    model = factory(**config)
    _init_weights(model, gen)
    if hasattr(model, "reset_head"):
        model.reset_head()
    model.level = level
    model.arch_name = arch_name
    model.arch_config = config
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    model_id: str
    level: str
    arch_name: str
    arch_config: dict
    state_dict: dict
    history: list[dict] = field(default_factory=list)
    fold_index: int | None = None
    best_epoch: int | None = None

    @classmethod
    def from_model(cls, model: nn.Module, model_id: str, history=None, fold_index=None,
                   best_epoch=None) -> "ModelCheckpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model_id, model.level, model.arch_name, dict(model.arch_config), state,
                   list(history or []), fold_index, best_epoch)

    def build(self) -> nn.Module:
        model = build_model(self.level, self.arch_name, self.arch_config)
        model.load_state_dict(copy.deepcopy(self.state_dict))
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.state_dict, buf)
        blob = buf.getvalue()
        (path / "weights.bin").write_bytes(blob)
        config = {
            "model_id": self.model_id,
            "level": self.level,
            "arch_name": self.arch_name,
            "arch_config": self.arch_config,
            "fold_index": self.fold_index,
            "best_epoch": self.best_epoch,
            "weights_sha256": hashlib.sha256(blob).hexdigest(),
        }
        (path / "config.json").write_text(json.dumps(config, indent=2) + "\n")
        (path / "history.json").write_text(json.dumps(self.history, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path, level: str | None = None) -> "ModelCheckpoint":
        path = Path(path)
        try:
            config = json.loads((path / "config.json").read_text())
            blob = (path / "weights.bin").read_bytes()
        except FileNotFoundError as e:
            raise IntegrityError(f"incomplete checkpoint at {path}: {e.filename} missing") from e
        if hashlib.sha256(blob).hexdigest() != config.get("weights_sha256"):
            raise IntegrityError(f"{path}/weights.bin does not match its recorded SHA-256 digest")
        if level is not None and config["level"] != level:
            raise ContractMismatchError(f"checkpoint {path} is {config['level']}-level, expected {level}")
        hist_path = path / "history.json"
        history = json.loads(hist_path.read_text()) if hist_path.exists() else []
        state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
        return cls(config["model_id"], config["level"], config["arch_name"], config["arch_config"],
                   state, history, config.get("fold_index"), config.get("best_epoch"))


def save_checkpoint(model: nn.Module, history: list[dict], path: str | Path, model_id: str = "model",
                    fold_index: int | None = None) -> Path:
    return ModelCheckpoint.from_model(model, model_id, history, fold_index).save(path)


def load_checkpoint(path: str | Path, level: str | None = None) -> nn.Module:
    return ModelCheckpoint.load(path, level).build()


def set_deterministic(seed: int | None = None) -> None:
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)
