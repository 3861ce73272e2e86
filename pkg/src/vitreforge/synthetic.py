"""Seeded random plain-ViT checkpoints for tests and self-verification."""
from __future__ import annotations

import numpy as np

from .checkpoint import Archive, PlainVitSchema

NANO = dict(depth=4, dim=8, heads=2, patch=4, img=32)
VIT_B = dict(depth=12, dim=768, heads=12, patch=16, img=224)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding ``[grid*grid, dim]`` (MAE style).

    First half of the channels encodes the row, second half the column.
    """
    if dim % 4:
        raise ValueError(f"sincos embedding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")

    def embed_1d(pos):
        out = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([embed_1d(ys), embed_1d(xs)], axis=1).astype(np.float32)


def make_plain_vit(depth: int, dim: int, heads: int, patch: int, img: int, *, seed: int = 0,
                   mlp_ratio: int = 4, cls_token: bool = False, n_classes: int | None = None,
                   pos_embed: str = "sincos") -> Archive:
    """Build a plain ViT archive with the canonical key set and random weights.

    Matrices are drawn with std ``1/sqrt(fan_in)`` so activations stay O(1) at
    any width. ``pos_embed`` is ``"sincos"`` or ``"random"``.
    """
    if img % patch:
        raise ValueError(f"img {img} not divisible by patch {patch}")
    grid = img // patch
    schema = PlainVitSchema(depth=depth, dim=dim, heads=heads, mlp_hidden=mlp_ratio * dim, patch=patch,
                            grid=grid, has_cls_token=cls_token, n_classes=n_classes)
    rng = np.random.default_rng(seed)
    archive = Archive(metadata={"heads": str(heads), "source": "synthetic"})
    for key, shape in schema.expected_shapes().items():
        if key == "pos_embed":
            if pos_embed == "sincos":
                spatial = sincos_pos_embed(dim, grid)
            elif pos_embed == "random":
                spatial = rng.standard_normal((grid * grid, dim), dtype=np.float32) * np.float32(0.5)
            else:
                raise ValueError(f"unknown pos_embed kind {pos_embed!r}")
            if cls_token:
                spatial = np.concatenate([np.zeros((1, dim), np.float32), spatial])
            value = spatial[None]
        elif key.endswith(("norm1.weight", "norm2.weight")) or key == "norm.weight":
            value = 1.0 + 0.1 * rng.standard_normal(shape, dtype=np.float32)
        elif len(shape) == 1 or key == "cls_token":
            value = 0.1 * rng.standard_normal(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape, dtype=np.float32) * np.float32(fan_in ** -0.5)
        archive[key] = np.ascontiguousarray(value, dtype=np.float32)
    return archive


def make_nano(seed: int = 0, **kwargs) -> Archive:
    """ViT-Nano: depth 4, dim 8, heads 2, patch 4, image 32."""
    return make_plain_vit(**{**NANO, **kwargs}, seed=seed)


def make_vit_b(seed: int = 0, **kwargs) -> Archive:
    """Full-shape ViT-B/16 at 224 (about 86M parameters, ~345 MB)."""
    return make_plain_vit(**{**VIT_B, **kwargs}, seed=seed)
