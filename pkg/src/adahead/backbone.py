"""Minimal convolutional pyramid: six 3x3 blocks with leaky-rectifier
activations, downsampling at blocks 1-5, feature taps at strides 8/16/32
unified to the head channel count by 1x1 projections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import PyramidFeatures
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    widths: tuple = (16, 32, 64, 64, 64)   # per downsampling block
    strides: tuple = (8, 16, 32)           # pyramid taps
    head_channels: int = 64
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.stem_channels <= 0 or any(w <= 0 for w in self.widths):
            raise ConfigError("channel widths must be positive")
        for s in self.strides:
            if s & (s - 1) or s < 2:
                raise ConfigError(f"strides must be powers of two >= 2, got {s}")
        max_block_stride = 2 ** len(self.widths)
        if max(self.strides) > max_block_stride:
            raise ConfigError(
                f"stride {max(self.strides)} unreachable with {len(self.widths)} "
                f"downsampling blocks")

    def tap_blocks(self) -> list[int]:
        """1-based downsampling block index producing each pyramid stride."""
        return [int(math.log2(s)) for s in self.strides]


@dataclass
class BackboneParams:
    stem_kernel: Tensor
    stem_bias: Tensor
    block_kernels: list[Tensor]
    block_biases: list[Tensor]
    proj_kernels: list[Tensor]
    proj_biases: list[Tensor]

    def tensors(self) -> dict[str, Tensor]:
        out = {"stem_kernel": self.stem_kernel, "stem_bias": self.stem_bias}
        for i, (k, b) in enumerate(zip(self.block_kernels, self.block_biases)):
            out[f"block{i + 1}_kernel"] = k
            out[f"block{i + 1}_bias"] = b
        for i, (k, b) in enumerate(zip(self.proj_kernels, self.proj_biases)):
            out[f"proj{i}_kernel"] = k
            out[f"proj{i}_bias"] = b
        return out


def init_backbone_params(config: BackboneConfig, in_channels: int = 3,
                         rng: np.random.Generator | None = None) -> BackboneParams:
    rng = rng or np.random.default_rng(0)

    def conv(k, cin, cout):
        bound = 1.0 / math.sqrt(k * k * cin)
        return (T.param(rng.uniform(-bound, bound, (k, k, cin, cout))),
                T.param(np.zeros(cout)))

    stem_k, stem_b = conv(3, in_channels, config.stem_channels)
    block_kernels, block_biases = [], []
    cin = config.stem_channels
    for width in config.widths:
        k, b = conv(3, cin, width)
        block_kernels.append(k)
        block_biases.append(b)
        cin = width
    proj_kernels, proj_biases = [], []
    for block_ix in config.tap_blocks():
        k, b = conv(1, config.widths[block_ix - 1], config.head_channels)
        proj_kernels.append(k)
        proj_biases.append(b)
    return BackboneParams(stem_kernel=stem_k, stem_bias=stem_b,
                          block_kernels=block_kernels, block_biases=block_biases,
                          proj_kernels=proj_kernels, proj_biases=proj_biases)


def backbone_forward(image: Tensor, params: BackboneParams,
                     config: BackboneConfig) -> PyramidFeatures:
    """Image (N, H, W, 3) with dims divisible by the max stride -> pyramid."""
    max_stride = max(config.strides)
    if image.shape[1] % max_stride or image.shape[2] % max_stride:
        raise ConfigError(
            f"input {image.shape[1]}x{image.shape[2]} not divisible by stride "
            f"{max_stride}; pad before the forward pass")
    x = T.leaky_relu(T.conv2d(image, params.stem_kernel, params.stem_bias),
                     config.leaky_slope)
    taps = {}
    tap_blocks = set(config.tap_blocks())
    for i, (k, b) in enumerate(zip(params.block_kernels, params.block_biases), 1):
        x = T.leaky_relu(T.conv2d(x, k, b, stride=2), config.leaky_slope)
        if i in tap_blocks:
            taps[i] = x
    levels = []
    for block_ix, pk, pb in zip(config.tap_blocks(), params.proj_kernels,
                                params.proj_biases):
        levels.append(T.conv2d(taps[block_ix], pk, pb))
    return PyramidFeatures(levels=levels)


def pad_to_stride(image: np.ndarray, stride: int) -> np.ndarray:
    """Zero-pad H and W up to the next multiple of stride."""
    h, w = image.shape[:2]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return image
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad)
