"""Residual convolutional encoder (18-layer family, basic blocks) with an input batch-norm layer.

Features can be tapped at five depths: after the stem (conv, norm, ReLU,
max-pool) and after each of the four residual stages.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import BatchNorm, Conv2d, Module, ModuleList
from .rng import make_generator
from .tensor import Tensor

TAP_COUNT = 5
# stem conv (2) x max-pool (2) x stages (1, 2, 2, 2)
STAGE_STRIDES = (1, 2, 2, 2)
TOTAL_STRIDE = 32


@dataclass
class EncoderConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    input_size: int = 64
    stem_kernel: int = 7

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.blocks_per_stage = tuple(self.blocks_per_stage)

    @classmethod
    def resnet18(cls) -> EncoderConfig:
        return cls(stem_channels=64, stage_channels=(64, 128, 256, 512), blocks_per_stage=(2, 2, 2, 2),
                   input_size=224, stem_kernel=7)

    def validate(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("encoder needs exactly four stages")
        if self.input_size <= 0 or self.input_size % TOTAL_STRIDE:
            raise ValueError(f"input_size {self.input_size} is incompatible with the total stride {TOTAL_STRIDE}")
        chans = (self.stem_channels,) + self.stage_channels
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"channel counts must be non-decreasing with depth, got {chans}")
        if min(self.blocks_per_stage) < 1:
            raise ValueError("every stage needs at least one block")

    def tap_shape(self, tap: int) -> tuple[int, int]:
        """(channels, grid side) at a tap."""
        if not 1 <= tap <= TAP_COUNT:
            raise ValueError(f"tap must be in 1..{TAP_COUNT}, got {tap}")
        side = self.input_size // 4
        if tap == 1:
            return self.stem_channels, side
        for s in STAGE_STRIDES[:tap - 1]:
            side //= s
        return self.stage_channels[tap - 2], side

    @property
    def grid(self) -> int:
        return self.tap_shape(TAP_COUNT)[1]

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass
class FeatureMap:
    tensor: Tensor
    tap_index: int
    pooled: Tensor | None = field(default=None)


class BasicBlock(Module):
    def __init__(self, c_in, c_out, stride, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, pad=1, dtype=dtype)
        self.bn1 = BatchNorm(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, pad=1, dtype=dtype)
        self.bn2 = BatchNorm(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.down = Conv2d(c_in, c_out, 1, rng, stride=stride, dtype=dtype)
            self.down_bn = BatchNorm(c_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn1(self.conv1(x)).relu()
        y = self.bn2(self.conv2(y))
        skip = self.down_bn(self.down(x)) if hasattr(self, "down") else x
        return (y + skip).relu()


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int, dtype=np.float32):
        config.validate()
        self._config = config
        rng = make_generator(seed, "encoder")
        self.input_bn = BatchNorm(3, dtype=dtype)
        k = config.stem_kernel
        self.stem = Conv2d(3, config.stem_channels, k, rng, stride=2, pad=k // 2, dtype=dtype)
        self.stem_bn = BatchNorm(config.stem_channels, dtype=dtype)
        stages, c_in = [], config.stem_channels
        for c_out, n_blocks, stride in zip(config.stage_channels, config.blocks_per_stage, STAGE_STRIDES):
            blocks = []
            for b in range(n_blocks):
                blocks.append(BasicBlock(c_in, c_out, stride if b == 0 else 1, rng, dtype))
                c_in = c_out
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)

    @property
    def config(self) -> EncoderConfig:
        return self._config

    def __call__(self, images: Tensor, tap: int = TAP_COUNT) -> Tensor:
        x = self.input_bn(images)
        x = F.max_pool2d(self.stem_bn(self.stem(x)).relu(), 3, 2, 1)
        for stage in list(self.stages)[:tap - 1]:
            for block in stage:
                x = block(x)
        return x


def build_encoder(config: EncoderConfig, seed: int, dtype=np.float32) -> Encoder:
    return Encoder(config, seed, dtype)


def encode(encoder: Encoder, images, tap: int = TAP_COUNT, pool: bool = False) -> FeatureMap:
    if not 1 <= tap <= TAP_COUNT:
        raise ValueError(f"tap must be in 1..{TAP_COUNT}, got {tap}")
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=encoder.input_bn.gamma.dtype))
    s = encoder.config.input_size
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
        raise ValueError(f"expected B x 3 x {s} x {s} images, got {images.shape}")
    out = encoder(images, tap)
    return FeatureMap(out, tap, F.global_avg_pool(out) if pool else None)
