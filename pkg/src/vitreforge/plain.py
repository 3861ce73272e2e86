"""Reference forward pass of a plain (single-resolution) ViT encoder.

This path is the oracle the hierarchical model is checked against, so it is
kept deliberately literal.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .checkpoint import Archive, PlainVitSchema, validate_plain_vit
from .errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, conv2d, gelu, layer_norm, linear, softmax

LN_EPS = 1e-6
_CUBIC_A = -0.75


@dataclass(frozen=True)
class BlockWeights:
    norm1_w: Tensor
    norm1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    norm2_w: Tensor
    norm2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @classmethod
    def from_params(cls, params, index: int) -> "BlockWeights":
        p = f"blocks.{index}."
        return cls(
            params[p + "norm1.weight"], params[p + "norm1.bias"],
            params[p + "attn.qkv.weight"], params[p + "attn.qkv.bias"],
            params[p + "attn.proj.weight"], params[p + "attn.proj.bias"],
            params[p + "norm2.weight"], params[p + "norm2.bias"],
            params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"],
            params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"],
        )

    @property
    def dim(self) -> int:
        return self.proj_w.shape[0]


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution weights (a=-0.75) for taps at -1, 0, 1, 2."""
    a = _CUBIC_A

    def near(x):  # |x| <= 1
        return ((a + 2) * x - (a + 3)) * x * x + 1

    def far(x):  # 1 < |x| < 2
        return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a

    return np.stack([far(t + 1), near(t), near(1 - t), far(2 - t)], axis=-1)


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` float64 matrix doing 1-D bicubic resampling.

    Half-pixel centers (align_corners=False), border taps clamped, matching
    the usual framework ``bicubic`` interpolation. For ``n_in == n_out`` it is
    exactly the identity.
    """
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(src)
    weights = _cubic_weights(src - base)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(4):
        idx = np.clip(base.astype(np.int64) - 1 + tap, 0, n_in - 1)
        np.add.at(m, (np.arange(n_out), idx), weights[:, tap])
    return m


def resize_pos_grid(grid: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bicubically resample a ``[h, w, dim]`` embedding grid to ``[out_h, out_w, dim]``."""
    h, w, _ = grid.shape
    if (h, w) == (out_h, out_w):
        return as_tensor(grid).copy()
    my = bicubic_matrix(h, out_h)
    mx = bicubic_matrix(w, out_w)
    out = np.einsum("Yy,yxc,Xx->YXc", my, grid.astype(np.float64), mx, optimize=True)
    return as_tensor(out)


def split_pos_embed(pos_embed: Tensor, has_cls_token: bool) -> tuple[Tensor | None, Tensor]:
    """Split ``[1, N(+1), dim]`` into (class row ``[dim]`` or None, spatial grid ``[g, g, dim]``)."""
    tokens = pos_embed[0]
    cls_row = tokens[0] if has_cls_token else None
    spatial = tokens[1:] if has_cls_token else tokens
    g = int(round(np.sqrt(spatial.shape[0])))
    return cls_row, spatial.reshape(g, g, -1)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         bias: Tensor | None = None, key_mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over batches of token groups.

    ``q, k, v`` are ``[B, N, dim]``; ``bias`` broadcasts against the logits
    ``[B, heads, N, N]``; ``key_mask`` is boolean ``[B, N]`` with False marking
    keys that must get zero weight. Returns ``[B, N, dim]``.
    """
    b, n, dim = q.shape
    hd = dim // heads

    def split(t):
        return t.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)

    logits = (split(q) @ split(k).transpose(0, 1, 3, 2)) * np.float32(hd ** -0.5)
    if bias is not None:
        logits = logits + bias
    if key_mask is not None:
        logits = np.where(key_mask[:, None, None, :], logits, np.float32(-np.inf))
    out = softmax(logits, axis=-1) @ split(v)
    return np.ascontiguousarray(out.transpose(0, 2, 1, 3)).reshape(b, n, dim)


def global_attention(x: Tensor, w: BlockWeights, heads: int) -> Tensor:
    """Multi-head self-attention over all tokens of ``x[N, dim]``."""
    n, dim = x.shape
    if heads < 1 or dim % heads:
        raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
    qkv = linear(x, w.qkv_w, w.qkv_b)
    q, k, v = (qkv[None, :, i * dim:(i + 1) * dim] for i in range(3))
    out = multi_head_attention(q, k, v, heads)[0]
    return linear(out, w.proj_w, w.proj_b)


def mlp(x: Tensor, w: BlockWeights) -> Tensor:
    return linear(gelu(linear(x, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b)


def vit_block(x: Tensor, w: BlockWeights, heads: int, eps: float = LN_EPS,
              attention: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Pre-norm transformer block on ``x[N, dim]``.

    ``attention`` maps normed tokens to attention output; the default is
    global attention with this block's weights.
    """
    if attention is None:
        attention = lambda t: global_attention(t, w, heads)  # noqa: E731
    x = x + attention(layer_norm(x, w.norm1_w, w.norm1_b, eps))
    return x + mlp(layer_norm(x, w.norm2_w, w.norm2_b, eps), w)


class PlainVitModel:
    """A validated plain ViT checkpoint ready for inference."""

    def __init__(self, weights: Archive, heads: int | None = None, eps: float = LN_EPS):
        self.schema: PlainVitSchema = validate_plain_vit(weights, heads)
        self.weights = weights
        self.eps = eps
        self.blocks = [BlockWeights.from_params(weights, i) for i in range(self.schema.depth)]

    @property
    def heads(self) -> int:
        return self.schema.heads


def patch_embed_plain(img: Tensor, model: PlainVitModel) -> Tensor:
    """Non-overlapping patch projection ``[3,H,W] -> [N, dim]`` in row-major order."""
    p = model.schema.patch
    if img.ndim != 3 or img.shape[1] % p or img.shape[2] % p:
        raise DimensionError(f"image {tuple(img.shape)} spatial size must be divisible by patch {p}")
    fmap = conv2d(img, model.weights["patch_embed.proj.weight"], model.weights["patch_embed.proj.bias"],
                  stride=p, pad=0)
    return np.ascontiguousarray(fmap.reshape(fmap.shape[0], -1).T)


def forward_plain(img: Tensor, model: PlainVitModel, head: str = "tokens") -> Tensor:
    """Run the plain encoder.

    ``head="tokens"`` returns normed tokens ``[N(+1), dim]`` (class token first
    when present); ``head="cls_logits"`` mean-pools the spatial tokens and
    applies the classifier.
    """
    if head not in ("tokens", "cls_logits"):
        raise ConfigError(f"unknown head {head!r}")
    if head == "cls_logits" and model.schema.n_classes is None:
        raise ConfigError("head=cls_logits but the checkpoint has no head.weight/head.bias")
    s = model.schema
    x = patch_embed_plain(img, model)
    gh, gw = img.shape[1] // s.patch, img.shape[2] // s.patch
    cls_pos, grid = split_pos_embed(model.weights["pos_embed"], s.has_cls_token)
    x = x + resize_pos_grid(grid, gh, gw).reshape(gh * gw, s.dim)
    if s.has_cls_token:
        cls = model.weights["cls_token"].reshape(1, s.dim) + cls_pos
        x = np.concatenate([cls, x], axis=0)
    for w in model.blocks:
        x = vit_block(x, w, s.heads, model.eps)
    x = layer_norm(x, model.weights["norm.weight"], model.weights["norm.bias"], model.eps)
    if head == "tokens":
        return x
    pooled = x[1:].mean(axis=0, dtype=np.float32) if s.has_cls_token else x.mean(axis=0, dtype=np.float32)
    return linear(pooled, model.weights["head.weight"], model.weights["head.bias"])
