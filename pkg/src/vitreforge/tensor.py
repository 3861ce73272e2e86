"""Dense f32 kernels for ViT forward inference.

Tensors are plain C-contiguous ``numpy.float32`` arrays. Every function here is
pure: inputs are never modified and outputs are fresh arrays.

Average pooling always divides by the full window area (padding counts), so a
pooling window is exactly a fixed convolution. The re-parameterization merge
relies on that.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError

Tensor = np.ndarray

_SQRT1_2 = np.float32(1.0 / np.sqrt(2.0))


def as_tensor(x) -> Tensor:
    """Return ``x`` as a C-contiguous float32 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: Tensor, b: Tensor, *, exact_order: bool = False) -> Tensor:
    """Matrix product of ``a[m,k]`` and ``b[k,n]``.

    The default path goes through BLAS, which is deterministic for a fixed
    build and thread count. ``exact_order=True`` accumulates strictly
    sequentially over ``k`` in f32, reproducing a naive triple loop bit for bit
    on any machine (much slower; meant for regression fixtures).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    a = as_tensor(a)
    b = as_tensor(b)
    if not exact_order:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[None, t, :]
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {tuple(x.shape)} does not match weight {tuple(weight.shape)}")
    y = as_tensor(x) @ weight.T
    if bias is not None:
        y += bias
    return y


def _check_window(name: str, h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> None:
    if stride < 1:
        raise DimensionError(f"{name}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"{name}: pad must be >= 0, got {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"{name}: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")


def _windows(x: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    """Strided view ``[C, H', W', kh, kw]`` over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``, zero padding."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(w.shape)}")
    cout, cin, kh, kw = w.shape
    _check_window("conv2d", x.shape[1], x.shape[2], kh, kw, stride, pad)
    win = _windows(as_tensor(x), kh, kw, stride, pad)
    ho, wo = win.shape[1], win.shape[2]
    # im2col: rows are output positions, columns follow the kernel's (cin, kh, kw) layout
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, cin * kh * kw)
    out = cols @ as_tensor(w).reshape(cout, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.T).reshape(cout, ho, wo)


def avg_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Mean over ``k x k`` windows; the divisor is always ``k*k`` (count-include-pad)."""
    if x.ndim != 3:
        raise DimensionError(f"avg_pool2d: expected [C,H,W], got {tuple(x.shape)}")
    _check_window("avg_pool2d", x.shape[1], x.shape[2], k, k, stride, pad)
    win = _windows(as_tensor(x), k, k, stride, pad)
    return np.ascontiguousarray(win.sum(axis=(3, 4), dtype=np.float32) / np.float32(k * k))


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max over ``k x k`` windows, no padding."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool2d: expected [C,H,W], got {tuple(x.shape)}")
    _check_window("max_pool2d", x.shape[1], x.shape[2], k, k, stride, 0)
    win = _windows(as_tensor(x), k, k, stride, 0)
    return np.ascontiguousarray(win.max(axis=(3, 4)))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean of ``x[C,H,W]`` -> ``[C]``."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool: expected [C,H,W], got {tuple(x.shape)}")
    c = x.shape[0]
    return as_tensor(x).reshape(c, -1).mean(axis=1, dtype=np.float32)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with the biased variance."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gamma {tuple(gamma.shape)} / beta {tuple(beta.shape)} "
            f"do not match last axis of {tuple(x.shape)}")
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True, dtype=np.float32)
    return centered / np.sqrt(var + np.float32(eps)) * gamma + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. ``-inf`` entries get probability 0."""
    x = as_tensor(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True, dtype=np.float32)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` via erf (not the tanh approximation)."""
    x = as_tensor(x)
    return np.float32(0.5) * x * (np.float32(1.0) + erf(x * _SQRT1_2).astype(np.float32))
