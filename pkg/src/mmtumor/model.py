"""Two-head multimodal network: dense convolutional image head + tabular MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import ScalerParams
from .errors import ConfigError, ShapeError
from .features import NUM_FEATURES

CHECKPOINT_VERSION = 1

PIXEL_SCALE = 255.0

FUSION_NORM_KINDS = ("batch", "layer")


@dataclass(frozen=True)
class DenseNetConfig:
    """Densely connected convolutional backbone layout."""

    initial_features: int = 64
    growth_rate: int = 32
    block_layers: tuple[int, ...] = (6, 12, 24, 16)
    compression: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_layers", tuple(self.block_layers))
        if self.initial_features < 1 or self.growth_rate < 1:
            raise ConfigError("initial_features and growth_rate must be >= 1")
        if not self.block_layers or any(n < 1 for n in self.block_layers):
            raise ConfigError(f"block_layers must be positive, got {self.block_layers}")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(f"compression must be in (0, 1], got {self.compression}")


@dataclass(frozen=True)
class MlpConfig:
    """Hidden-layer widths of a ReLU stack."""

    widths: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")


@dataclass(frozen=True)
class ModelSpec:
    """Complete architecture description; defaults mirror the reference run."""

    image_input_shape: tuple[int, int, int] = (240, 240, 3)
    image_head: DenseNetConfig = DenseNetConfig()
    tabular_head: MlpConfig = MlpConfig((64, 32))
    fusion_norm: str = "batch"
    classifier: MlpConfig = MlpConfig((256, 64))
    tabular_input_width: int = NUM_FEATURES
    output_classes: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_input_shape", tuple(self.image_input_shape))
        if len(self.image_input_shape) != 3 or any(d < 1 for d in self.image_input_shape):
            raise ConfigError(f"bad image_input_shape {self.image_input_shape}")
        if self.fusion_norm not in FUSION_NORM_KINDS:
            raise ConfigError(
                f"fusion_norm must be one of {FUSION_NORM_KINDS}, got {self.fusion_norm!r}"
            )
        if self.tabular_input_width != NUM_FEATURES:
            raise ConfigError(
                f"tabular_input_width must be {NUM_FEATURES}, got {self.tabular_input_width}"
            )
        if self.output_classes != 2:
            raise ConfigError(f"output_classes must be 2, got {self.output_classes}")


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def image_feature_shape(spec: ModelSpec) -> tuple[int, int, int]:
    """Backbone output as (channels, height, width), computed analytically."""
    cfg = spec.image_head
    h, w, _ = spec.image_input_shape
    h, w = _conv_out(h, 7, 2, 3), _conv_out(w, 7, 2, 3)
    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    channels = cfg.initial_features
    for i, layers in enumerate(cfg.block_layers):
        channels += layers * cfg.growth_rate
        if i < len(cfg.block_layers) - 1:
            channels = int(math.floor(channels * cfg.compression))
            h, w = h // 2, w // 2
    if h < 1 or w < 1:
        raise ConfigError(
            f"image input {spec.image_input_shape[:2]} too small for "
            f"{len(cfg.block_layers)} dense blocks"
        )
    return channels, h, w


@dataclass(frozen=True)
class Batch:
    """Aligned model inputs; images are B×H×W×C with intensities in [0, 255]."""

    images: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ShapeError(f"images must be B×H×W×C, got shape {self.images.shape}")
        if self.features.ndim != 2 or self.features.shape[1] != NUM_FEATURES:
            raise ShapeError(f"features must be B×{NUM_FEATURES}, got shape {self.features.shape}")
        if self.features.shape[0] != self.images.shape[0]:
            raise ShapeError(
                f"batch size mismatch: {self.images.shape[0]} images vs "
                f"{self.features.shape[0]} feature rows"
            )
        if self.labels is not None and self.labels.shape != (self.images.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match batch size "
                f"{self.images.shape[0]}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]


class _DenseLayer(nn.Module):
    """BN -> ReLU -> 1x1 conv (bottleneck) -> BN -> ReLU -> 3x3 conv."""

    def __init__(self, in_channels: int, growth_rate: int) -> None:
        super().__init__()
        bottleneck = 4 * growth_rate
        self.norm1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, bottleneck, kernel_size=1, bias=False)
        self.norm2 = nn.BatchNorm2d(bottleneck)
        self.conv2 = nn.Conv2d(bottleneck, growth_rate, kernel_size=3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.relu(self.norm1(x)))
        return self.conv2(F.relu(self.norm2(out)))


class _DenseBlock(nn.Module):
    """Each layer consumes the concatenation of all previous outputs."""

    def __init__(self, in_channels: int, num_layers: int, growth_rate: int) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            _DenseLayer(in_channels + i * growth_rate, growth_rate) for i in range(num_layers)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class _Transition(nn.Module):
    """BN -> ReLU -> 1x1 conv (compression) -> 2x2 average pool."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.norm = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)
        self.pool = nn.AvgPool2d(kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.conv(F.relu(self.norm(x))))


class DenseNetBackbone(nn.Module):
    """Stem + dense blocks with transitions + final BN/ReLU feature map."""

    def __init__(self, cfg: DenseNetConfig, in_channels: int) -> None:
        super().__init__()
        self.stem_conv = nn.Conv2d(
            in_channels, cfg.initial_features, kernel_size=7, stride=2, padding=3, bias=False
        )
        self.stem_norm = nn.BatchNorm2d(cfg.initial_features)
        self.stem_pool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        blocks: list[nn.Module] = []
        channels = cfg.initial_features
        for i, layers in enumerate(cfg.block_layers):
            blocks.append(_DenseBlock(channels, layers, cfg.growth_rate))
            channels += layers * cfg.growth_rate
            if i < len(cfg.block_layers) - 1:
                out_channels = int(math.floor(channels * cfg.compression))
                blocks.append(_Transition(channels, out_channels))
                channels = out_channels
        self.blocks = nn.Sequential(*blocks)
        self.final_norm = nn.BatchNorm2d(channels)
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem_pool(F.relu(self.stem_norm(self.stem_conv(x))))
        return F.relu(self.final_norm(self.blocks(x)))


class MultimodalNet(nn.Module):
    """Image backbone + tabular MLP, fused by normalization then a classifier."""

    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        self.spec = spec
        channels, h, w = image_feature_shape(spec)
        self.image_out_width = channels * h * w
        self.backbone = DenseNetBackbone(spec.image_head, spec.image_input_shape[2])
        tabular_layers: list[nn.Module] = []
        width = spec.tabular_input_width
        for out_width in spec.tabular_head.widths:
            tabular_layers += [nn.Linear(width, out_width), nn.ReLU()]
            width = out_width
        self.tabular = nn.Sequential(*tabular_layers)
        self.fused_width = self.image_out_width + width
        if spec.fusion_norm == "batch":
            self.fusion_norm = nn.BatchNorm1d(self.fused_width)
        else:
            self.fusion_norm = nn.LayerNorm(self.fused_width)
        classifier_layers: list[nn.Module] = []
        width = self.fused_width
        for out_width in spec.classifier.widths:
            classifier_layers += [nn.Linear(width, out_width), nn.ReLU()]
            width = out_width
        classifier_layers.append(nn.Linear(width, spec.output_classes))
        self.classifier = nn.Sequential(*classifier_layers)

    def forward(self, images: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        """images: B×C×H×W in [0, 1]; features: B×13. Returns B×2 probabilities."""
        image_vec = torch.flatten(self.backbone(images), start_dim=1)
        tabular_vec = self.tabular(features)
        fused = self.fusion_norm(torch.cat([image_vec, tabular_vec], dim=1))
        return F.softmax(self.classifier(fused), dim=1)


def _uniform_fill(tensor: torch.Tensor, bound: float, rng: np.random.Generator) -> None:
    values = rng.uniform(-bound, bound, size=tuple(tensor.shape))
    with torch.no_grad():
        tensor.copy_(torch.from_numpy(values).to(tensor.dtype))


def init_parameters(model: nn.Module, rng: np.random.Generator) -> None:
    """Seeded re-initialization of every layer, in module definition order.

    Conv and linear weights/biases are drawn uniformly from
    ±1/sqrt(fan_in); normalization layers reset to identity (scale 1,
    shift 0, zeroed running statistics).
    """
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels // module.groups * math.prod(module.kernel_size)
            bound = 1.0 / math.sqrt(fan_in)
            _uniform_fill(module.weight, bound, rng)
            if module.bias is not None:
                _uniform_fill(module.bias, bound, rng)
        elif isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.in_features)
            _uniform_fill(module.weight, bound, rng)
            if module.bias is not None:
                _uniform_fill(module.bias, bound, rng)
        elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm)):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
            if isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
                module.reset_running_stats()


def build_model(spec: ModelSpec, seed: int) -> MultimodalNet:
    """Construct and deterministically initialize the network."""
    channels, h, w = image_feature_shape(spec)
    if spec.image_input_shape == (240, 240, 3) and spec.image_head == DenseNetConfig():
        expected = (1024, 7, 7)
        if (channels, h, w) != expected or channels * h * w != 50176:
            raise ConfigError(
                f"default backbone must produce {expected} (flatten 50176), "
                f"got {(channels, h, w)}"
            )
    model = MultimodalNet(spec)
    init_parameters(model, np.random.default_rng(seed))
    model.eval()
    return model


def _validate_batch_against_spec(spec: ModelSpec, batch: Batch) -> None:
    height, width, channels = spec.image_input_shape
    _, h, w, c = batch.images.shape
    if h != height:
        raise ShapeError(f"images height {h} does not match configured {height}")
    if w != width:
        raise ShapeError(f"images width {w} does not match configured {width}")
    if c != channels:
        raise ShapeError(f"images channels {c} does not match configured {channels}")
    if batch.features.shape[1] != spec.tabular_input_width:
        raise ShapeError(
            f"features width {batch.features.shape[1]} does not match "
            f"configured {spec.tabular_input_width}"
        )


def batch_tensors(
    model: MultimodalNet, batch: Batch, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Validate a batch and convert it to scaled backend tensors (B×C×H×W)."""
    _validate_batch_against_spec(model.spec, batch)
    images = torch.from_numpy(
        np.ascontiguousarray(batch.images, dtype=np.float64) / PIXEL_SCALE
    ).to(dtype)
    images = images.permute(0, 3, 1, 2).contiguous()
    features = torch.from_numpy(np.ascontiguousarray(batch.features, dtype=np.float64)).to(dtype)
    return images, features


def forward(model: MultimodalNet, batch: Batch) -> np.ndarray:
    """Inference-mode forward pass returning B×2 class probabilities."""
    images, features = batch_tensors(model, batch)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = model(images, features)
    finally:
        model.train(was_training)
    return probs.numpy().astype(np.float64)


def predict_class(probabilities: np.ndarray) -> np.ndarray:
    """Per-row argmax over two classes; an exact tie predicts ill (1)."""
    probs = np.asarray(probabilities)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ShapeError(f"probabilities must be B×2, got shape {probs.shape}")
    return np.where(probs[:, 1] >= probs[:, 0], 1, 0).astype(np.int64)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def spec_to_dict(spec: ModelSpec) -> dict[str, Any]:
    return {
        "image_input_shape": list(spec.image_input_shape),
        "image_head": {
            "initial_features": spec.image_head.initial_features,
            "growth_rate": spec.image_head.growth_rate,
            "block_layers": list(spec.image_head.block_layers),
            "compression": spec.image_head.compression,
        },
        "tabular_head": {"widths": list(spec.tabular_head.widths)},
        "fusion_norm": spec.fusion_norm,
        "classifier": {"widths": list(spec.classifier.widths)},
        "tabular_input_width": spec.tabular_input_width,
        "output_classes": spec.output_classes,
    }


def spec_from_dict(data: Mapping[str, Any]) -> ModelSpec:
    known = {
        "image_input_shape",
        "image_head",
        "tabular_head",
        "fusion_norm",
        "classifier",
        "tabular_input_width",
        "output_classes",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "image_input_shape" in data:
        kwargs["image_input_shape"] = tuple(data["image_input_shape"])
    if "image_head" in data:
        head = dict(data["image_head"])
        if "block_layers" in head:
            head["block_layers"] = tuple(head["block_layers"])
        kwargs["image_head"] = DenseNetConfig(**head)
    if "tabular_head" in data:
        kwargs["tabular_head"] = MlpConfig(tuple(data["tabular_head"]["widths"]))
    if "classifier" in data:
        kwargs["classifier"] = MlpConfig(tuple(data["classifier"]["widths"]))
    for key in ("fusion_norm", "tabular_input_width", "output_classes"):
        if key in data:
            kwargs[key] = data[key]
    return ModelSpec(**kwargs)


def save_checkpoint(
    path: Path | str,
    model: MultimodalNet,
    scaler: ScalerParams | None = None,
    extra: Mapping[str, Any] | None = None,
) -> None:
    """Persist spec + parameters (+ scaler) for bit-identical reload."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(model.spec),
        "state_dict": model.state_dict(),
        "scaler": None
        if scaler is None
        else {
            "mean": torch.from_numpy(scaler.mean.copy()),
            "std": torch.from_numpy(scaler.std.copy()),
        },
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(
    path: Path | str,
) -> tuple[MultimodalNet, ScalerParams | None, dict[str, Any]]:
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    spec = spec_from_dict(payload["spec"])
    model = MultimodalNet(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    scaler = None
    if payload["scaler"] is not None:
        scaler = ScalerParams(
            mean=payload["scaler"]["mean"].numpy(), std=payload["scaler"]["std"].numpy()
        )
    return model, scaler, dict(payload["extra"])
