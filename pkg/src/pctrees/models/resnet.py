"""Quarter-width ResNet18 backbone and the two multi-view classifiers built on it.

Activations inside the backbone are channels-last (N×H×W×C); the public
inputs stay N×C×H×W.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import ConfigMismatch, ShapeMismatch
from ..raster import VIEWS
from ..tensor import Tensor
from .layers import BatchNorm, Conv2d, Linear, Module

FULL_RESNET18_WIDTHS = [64, 128, 256, 512]


@dataclass
class ResNetQuarterConfig:
    stage_widths: list[int] = field(default_factory=lambda: [w // 4 for w in FULL_RESNET18_WIDTHS])
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    input_channels: int = 1
    num_classes: int = 6
    fusion: str = "separate"

    def __post_init__(self):
        if self.fusion not in ("separate", "channels"):
            raise ConfigMismatch(f"unknown fusion {self.fusion!r}")
        expected = 1 if self.fusion == "separate" else len(VIEWS)
        if self.input_channels != expected:
            raise ConfigMismatch(
                f"fusion={self.fusion} needs input_channels={expected}, got {self.input_channels}")


class BasicBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, stride: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, 1)
        self.bn1 = BatchNorm(c_out, channel_axis=-1)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, 1)
        self.bn2 = BatchNorm(c_out, channel_axis=-1)
        if stride != 1 or c_in != c_out:
            self.down_conv = Conv2d(rng, c_in, c_out, 1, stride, 0)
            self.down_bn = BatchNorm(c_out, channel_axis=-1)
        else:
            self.down_conv = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = self.down_bn(self.down_conv(x)) if self.down_conv is not None else x
        return T.relu(out + skip)


class ResNetBackbone(Module):
    """ResNet18 topology; returns globally average-pooled features."""

    def __init__(self, rng, input_channels: int, widths, blocks):
        self.input_channels = input_channels
        self.stem = Conv2d(rng, input_channels, widths[0], 7, 2, 3)
        self.stem_bn = BatchNorm(widths[0], channel_axis=-1)
        layers = []
        c_in = widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(rng, c_in, w, stride))
                c_in = w
        self.blocks = layers
        self.out_dim = widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.input_channels:
            raise ShapeMismatch(f"backbone expects N x {self.input_channels} x H x W, got {x.shape}")
        out = T.transpose(x, (0, 2, 3, 1))
        out = T.relu(self.stem_bn(self.stem(out)))
        out = T.maxpool2d_nhwc(out, 3, 2, 1)
        for block in self.blocks:
            out = block(out)
        return T.mean_over(out, (1, 2))


class MultiViewCNN(Module):
    """Baseline (views as separate images) or baseline++ (views as channels).

    Input is N x 6 x res x res in the fixed view order.
    """

    def __init__(self, config: ResNetQuarterConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = ResNetBackbone(rng, config.input_channels, config.stage_widths,
                                       config.blocks_per_stage)
        feat = self.backbone.out_dim * (len(VIEWS) if config.fusion == "separate" else 1)
        self.head = Linear(rng, feat, config.num_classes)
        self.last_backbone_batch = 0

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.head.weight.dtype))
        if x.ndim != 4 or x.shape[1] != len(VIEWS):
            raise ShapeMismatch(f"expected N x {len(VIEWS)} x res x res, got {x.shape}")
        n, v, h, w = x.shape
        if self.config.fusion == "separate":
            imgs = T.reshape(x, (n * v, 1, h, w))
            feats = self.backbone(imgs)
            self.last_backbone_batch = n * v
            feats = T.reshape(feats, (n, v * self.backbone.out_dim))
        else:
            feats = self.backbone(x)
            self.last_backbone_batch = n
        return self.head(feats)


def multiview_forward(model: MultiViewCNN, batch, fusion: str | None = None) -> Tensor:
    if fusion is not None and fusion != model.config.fusion:
        raise ConfigMismatch(f"model built for fusion={model.config.fusion}, asked for {fusion}")
    return model(batch)


def backbone_parameter_count(widths, input_channels: int = 1, blocks=(2, 2, 2, 2)) -> int:
    """Parameter count of a ResNet18-style backbone, computed from its shapes."""
    total = input_channels * widths[0] * 49 + 2 * widths[0]
    c_in = widths[0]
    for i, (w, n) in enumerate(zip(widths, blocks)):
        for j in range(n):
            stride = 2 if (i > 0 and j == 0) else 1
            total += c_in * w * 9 + 2 * w + w * w * 9 + 2 * w
            if stride != 1 or c_in != w:
                total += c_in * w + 2 * w
            c_in = w
    return total
