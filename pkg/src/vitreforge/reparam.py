"""Fold the average-pool branch of a stage downsampler into its parallel conv.

A 3x3/stride-2/pad-1 average pool with count-include-pad divisor is the conv
whose kernel holds 1/9 on the channel diagonal. Adding that kernel to the
learned conv gives one conv with the same output. The merge would not be exact
under exclude-pad pooling, since there the border divisors vary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, as_tensor, avg_pool2d, conv2d

DOWNSAMPLE_KERNEL = 3
DOWNSAMPLE_STRIDE = 2
DOWNSAMPLE_PAD = 1


def pool_as_conv(channels: int, k: int) -> Tensor:
    """Kernel ``[C, C, k, k]`` with ``1/k^2`` where out==in channel, zero elsewhere."""
    w = np.zeros((channels, channels, k, k), dtype=np.float32)
    idx = np.arange(channels)
    w[idx, idx] = np.float32(1.0 / (k * k))
    return w


@dataclass(frozen=True)
class BranchedDownsampler:
    """Average pool plus a parallel learned conv, outputs summed."""
    conv_w: Tensor
    conv_b: Tensor
    pool_k: int = DOWNSAMPLE_KERNEL
    stride: int = DOWNSAMPLE_STRIDE
    pad: int = DOWNSAMPLE_PAD

    def __post_init__(self):
        c_out, c_in, kh, kw = self.conv_w.shape
        if c_out != c_in:
            raise ConfigError(f"downsampler conv must keep channels, got {self.conv_w.shape}")
        if self.conv_b.shape != (c_out,):
            raise ConfigError(f"conv bias shape {self.conv_b.shape} does not match {c_out} channels")

    @classmethod
    def zeros(cls, channels: int) -> "BranchedDownsampler":
        k = DOWNSAMPLE_KERNEL
        return cls(np.zeros((channels, channels, k, k), np.float32), np.zeros(channels, np.float32))

    @property
    def channels(self) -> int:
        return self.conv_w.shape[0]

    def num_params(self) -> int:
        return self.conv_w.size + self.conv_b.size

    def __call__(self, x: Tensor) -> Tensor:
        pooled = avg_pool2d(x, self.pool_k, self.stride, self.pad)
        return pooled + conv2d(x, self.conv_w, self.conv_b, self.stride, self.pad)


@dataclass(frozen=True)
class MergedDownsampler:
    """Single conv equivalent to a :class:`BranchedDownsampler`."""
    w: Tensor
    b: Tensor
    stride: int = DOWNSAMPLE_STRIDE
    pad: int = DOWNSAMPLE_PAD

    @property
    def channels(self) -> int:
        return self.w.shape[0]

    def num_params(self) -> int:
        return self.w.size + self.b.size

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.pad)


def merge(d: BranchedDownsampler) -> MergedDownsampler:
    kh, kw = d.conv_w.shape[2:]
    if (kh, kw) != (d.pool_k, d.pool_k):
        raise ConfigError(f"conv kernel {kh}x{kw} does not match pool kernel {d.pool_k}x{d.pool_k}")
    w = as_tensor(d.conv_w) + pool_as_conv(d.channels, d.pool_k)
    return MergedDownsampler(w, as_tensor(d.conv_b).copy(), d.stride, d.pad)


@dataclass(frozen=True)
class MergeReport:
    max_abs_diff: float
    trials: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tol


def verify_merge(d: BranchedDownsampler, m: MergedDownsampler, trials: int = 10, tol: float = 1e-5,
                 size: int = 14, seed: int = 0) -> MergeReport:
    """Compare both forms on ``trials`` random ``[C, size, size]`` inputs."""
    if trials < 1:
        raise ValueError("verify_merge needs at least one trial")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((d.channels, size, size), dtype=np.float32)
        worst = max(worst, float(np.abs(d(x) - m(x)).max()))
    return MergeReport(worst, trials, tol)
