"""Hierarchical ViT built from plain-ViT weights by surgery.

The plain checkpoint is reused as is. The 16x16 patch kernel slides with
stride 4 (12-pixel overlap). Blocks are grouped into four stages at strides
4/8/16/32. Early stages attend inside non-overlapping windows that carry a
relative position bias. Stages are joined by a downsampler, a 3x3/stride-2
average pool plus a parallel 3x3/stride-2 conv.

New parameters (downsampler convs, bias tables) start at zero. A freshly
surgered model is therefore a function of the pre-trained weights alone: each
downsampler is a pure average pool and each bias adds nothing.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Archive, PlainVitSchema, validate_plain_vit
from .errors import ConfigError, DimensionError, SchemaError
from .plain import (LN_EPS, BlockWeights, multi_head_attention, resize_pos_grid, split_pos_embed,
                    vit_block)
from .reparam import BranchedDownsampler, MergedDownsampler, merge
from .tensor import Tensor, as_tensor, conv2d, global_avg_pool, layer_norm, linear, max_pool2d

STRIDES = (4, 8, 16, 32)
HEADS = ("pyramid", "classification")
FINAL_POOLS = ("learned", "max2", "gap")
ATTENTION_PLANS = ("default", "detection")
NEW_PREFIX = "hier."


# --- configuration -----------------------------------------------------------

def _plan_to_text(plan) -> str:
    return ",".join("g" if ws is None else f"w{ws}" for ws in plan)


def _plan_from_text(text: str) -> tuple[int | None, ...]:
    plan = []
    for item in text.split(","):
        item = item.strip()
        if item == "g":
            plan.append(None)
        elif item.startswith("w") and item[1:].isdigit() and int(item[1:]) > 0:
            plan.append(int(item[1:]))
        else:
            raise ConfigError(f"bad window plan entry {item!r} (expected 'g' or 'w<size>')")
    return tuple(plan)


def _ints(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def detection_attention_plan(depth: int, window_size: int = 7) -> tuple[int | None, ...]:
    """Per-block attention kinds for the detection backbone.

    The plain baseline places four global blocks evenly (every ``depth/4``
    blocks). The first of them becomes windowed; the other three stay global.
    ``None`` marks global attention, an int the window size.
    """
    if depth < 4:
        raise ConfigError(f"detection plan needs depth >= 4, got {depth}")
    even = [round(q * depth / 4) for q in range(1, 5)]  # 1-based block numbers
    keep_global = set(even[1:])
    return tuple(None if (i + 1) in keep_global else window_size for i in range(depth))


@dataclass(frozen=True)
class HierVitConfig:
    stage_layout: tuple[int, int, int, int] = (2, 2, 6, 2)
    window_size: int = 7
    attention_plan: str = "default"
    window_plan: tuple[int | None, ...] | None = None
    embed_stride: int = 4
    embed_overlap: int = 12
    head: str = "pyramid"
    final_stage_pool: str | None = None
    tap_norm: bool = True

    def __post_init__(self):
        layout = tuple(self.stage_layout)
        object.__setattr__(self, "stage_layout", layout)
        if len(layout) != 4 or any(n < 1 for n in layout):
            raise ConfigError(f"stage_layout must be 4 positive ints, got {layout}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.final_stage_pool is not None and self.final_stage_pool not in FINAL_POOLS:
            raise ConfigError(f"final_stage_pool must be one of {FINAL_POOLS}, got {self.final_stage_pool!r}")
        if self.attention_plan not in ATTENTION_PLANS:
            raise ConfigError(f"attention_plan must be one of {ATTENTION_PLANS}, got {self.attention_plan!r}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.embed_stride < 1 or self.embed_overlap < 0:
            raise ConfigError("embed_stride must be >= 1 and embed_overlap >= 0")
        if self.window_plan is not None:
            object.__setattr__(self, "window_plan", tuple(self.window_plan))
        if self.head == "pyramid" and self.final_stage_pool == "gap":
            raise ConfigError("final_stage_pool=gap collapses stage 4 to 1x1; it is only valid for head=classification")

    @classmethod
    def for_schema(cls, schema: PlainVitSchema, **changes) -> "HierVitConfig":
        """Defaults fitted to a checkpoint: stage layout from depth, embed stride from patch."""
        depth = schema.depth
        if depth == 12:
            layout = (2, 2, 6, 2)
        elif depth % 6 == 0:
            layout = (depth // 6, depth // 6, depth // 2, depth // 6)
        elif depth % 4 == 0:
            layout = (depth // 4,) * 4
        else:
            layout = None
        stride = min(4, schema.patch)
        base = {"embed_stride": stride, "embed_overlap": schema.patch - stride}
        if layout is not None:
            base["stage_layout"] = layout
        elif "stage_layout" not in changes:
            raise ConfigError(f"no default stage layout for depth {depth}; pass stage_layout explicitly")
        return cls(**{**base, **changes})

    @property
    def depth(self) -> int:
        return sum(self.stage_layout)

    @property
    def taps(self) -> tuple[int, ...]:
        """1-based block numbers whose outputs feed the pyramid."""
        return tuple(int(v) for v in np.cumsum(self.stage_layout))

    @property
    def final_pool(self) -> str:
        if self.final_stage_pool is not None:
            return self.final_stage_pool
        return "gap" if self.head == "classification" else "learned"

    @property
    def embed_pad(self) -> int:
        return self.embed_overlap // 2

    def resolved_plan(self) -> tuple[int | None, ...]:
        if self.window_plan is not None:
            return self.window_plan
        if self.attention_plan == "detection":
            return detection_attention_plan(self.depth, self.window_size)
        n_windowed = self.stage_layout[0] + self.stage_layout[1]
        return tuple(self.window_size if i < n_windowed else None for i in range(self.depth))

    def stage_of_block(self, index: int) -> int:
        return int(np.searchsorted(np.cumsum(self.stage_layout), index, side="right"))

    def validate(self, schema: PlainVitSchema) -> None:
        if self.depth != schema.depth:
            raise ConfigError(
                f"stage_layout {list(self.stage_layout)} sums to {self.depth}, checkpoint depth is {schema.depth}")
        if self.embed_overlap != schema.patch - self.embed_stride:
            raise ConfigError(
                f"embed_overlap {self.embed_overlap} must equal patch {schema.patch} - stride {self.embed_stride}")
        if self.embed_overlap % 2:
            raise ConfigError(f"embed_overlap {self.embed_overlap} must be even (symmetric padding)")
        if len(self.resolved_plan()) != schema.depth:
            raise ConfigError(f"window plan has {len(self.resolved_plan())} entries, depth is {schema.depth}")
        if self.head == "classification" and schema.n_classes is None:
            raise ConfigError("head=classification but the checkpoint has no head.weight/head.bias")

    def to_text(self) -> str:
        """``key=value`` lines; round-trips through :meth:`from_text`."""
        lines = {
            "stage_layout": ",".join(map(str, self.stage_layout)),
            "window_size": str(self.window_size),
            "attention_plan": self.attention_plan,
            "window_plan": _plan_to_text(self.resolved_plan()),
            "embed_stride": str(self.embed_stride),
            "embed_overlap": str(self.embed_overlap),
            "head": self.head,
            "final_stage_pool": self.final_pool,
            "tap_norm": "true" if self.tap_norm else "false",
        }
        return "".join(f"{k}={v}\n" for k, v in lines.items())

    @classmethod
    def from_text(cls, text: str) -> "HierVitConfig":
        return cls().with_overrides(parse_key_values(text))

    def with_overrides(self, values: dict[str, str]) -> "HierVitConfig":
        """Return a copy with string overrides applied (unknown keys rejected)."""
        changes: dict = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key == "stage_layout":
                changes[key] = _ints(raw, key)
            elif key in ("window_size", "embed_stride", "embed_overlap"):
                changes[key] = _ints(raw, key)[0]
            elif key == "window_plan":
                changes[key] = _plan_from_text(raw)
            elif key in ("head", "attention_plan", "final_stage_pool"):
                changes[key] = raw.strip()
            elif key == "tap_norm":
                if raw.strip().lower() not in ("true", "false"):
                    raise ConfigError(f"tap_norm must be true/false, got {raw!r}")
                changes[key] = raw.strip().lower() == "true"
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return replace(self, **changes)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# --- pooling-only downsamplers -------------------------------------------------

@dataclass(frozen=True)
class MaxPoolDownsampler:
    k: int = 2
    stride: int = 2

    def num_params(self) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        return max_pool2d(x, self.k, self.stride)


@dataclass(frozen=True)
class GlobalPoolDownsampler:
    def num_params(self) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)[:, None, None]


# --- windows -------------------------------------------------------------------

@dataclass(frozen=True)
class PadInfo:
    height: int
    width: int
    padded_height: int
    padded_width: int

    @property
    def padded(self) -> bool:
        return (self.height, self.width) != (self.padded_height, self.padded_width)


def window_partition(x: Tensor, ws: int) -> tuple[Tensor, PadInfo]:
    """``[C,H,W] -> [nW, ws*ws, C]``, zero-padding bottom/right to multiples of ``ws``."""
    if ws < 1:
        raise ConfigError(f"window size must be >= 1, got {ws}")
    c, h, w = x.shape
    hp, wp = -(-h // ws) * ws, -(-w // ws) * ws
    info = PadInfo(h, w, hp, wp)
    if info.padded:
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w)))
    nh, nw = hp // ws, wp // ws
    win = x.reshape(c, nh, ws, nw, ws).transpose(1, 3, 2, 4, 0)
    return np.ascontiguousarray(win).reshape(nh * nw, ws * ws, c), info


def window_reverse(windows: Tensor, info: PadInfo, ws: int) -> Tensor:
    """Inverse of :func:`window_partition`, cropping the padding."""
    c = windows.shape[-1]
    nh, nw = info.padded_height // ws, info.padded_width // ws
    x = windows.reshape(nh, nw, ws, ws, c).transpose(4, 0, 2, 1, 3).reshape(c, info.padded_height, info.padded_width)
    return np.ascontiguousarray(x[:, :info.height, :info.width])


def rel_pos_index(ws: int) -> np.ndarray:
    """``[ws*ws, ws*ws]`` table index of the offset (key - query) between window tokens."""
    ys, xs = np.divmod(np.arange(ws * ws), ws)
    dy = ys[None, :] - ys[:, None] + ws - 1
    dx = xs[None, :] - xs[:, None] + ws - 1
    return dy * (2 * ws - 1) + dx


def window_attention(x: Tensor, w: BlockWeights, heads: int, ws: int,
                     bias_table: Tensor | None = None) -> Tensor:
    """Multi-head attention restricted to ``ws x ws`` windows of ``x[C,H,W]``.

    Projection weights are the block's global-attention weights. Keys that
    fall in the zero padding are masked out.
    """
    c, h, width = x.shape
    if c % heads:
        raise ConfigError(f"dim {c} is not divisible by heads {heads}")
    bias = None
    if bias_table is not None:
        if bias_table.shape != (heads, (2 * ws - 1) ** 2):
            raise ConfigError(
                f"bias table shape {tuple(bias_table.shape)} != {(heads, (2 * ws - 1) ** 2)} for window {ws}")
        bias = bias_table[:, rel_pos_index(ws)][None]
    windows, info = window_partition(x, ws)
    key_mask = None
    if info.padded:
        valid, _ = window_partition(np.ones((1, h, width), np.float32), ws)
        key_mask = valid[..., 0] > 0
    qkv = linear(windows, w.qkv_w, w.qkv_b)
    q, k, v = (qkv[..., i * c:(i + 1) * c] for i in range(3))
    out = linear(multi_head_attention(q, k, v, heads, bias, key_mask), w.proj_w, w.proj_b)
    return window_reverse(out, info, ws)


# --- model ---------------------------------------------------------------------

def map_to_tokens(x: Tensor) -> Tensor:
    return np.ascontiguousarray(x.reshape(x.shape[0], -1).T)


def tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    return np.ascontiguousarray(t.T).reshape(t.shape[1], h, w)


def norm_map(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """LayerNorm over the channel axis of a ``[C,H,W]`` map."""
    _, h, w = x.shape
    return tokens_to_map(layer_norm(map_to_tokens(x), gamma, beta, eps), h, w)


@dataclass
class FeaturePyramid:
    c4: Tensor
    c8: Tensor
    c16: Tensor
    c32: Tensor

    def levels(self) -> dict[str, Tensor]:
        return {"c4": self.c4, "c8": self.c8, "c16": self.c16, "c32": self.c32}

    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(t.shape) for t in self.levels().values()]


class HierModel:
    """Hierarchical ViT: reused plain weights plus the new ``hier.*`` parameters.

    ``reused`` holds private copies of every plain parameter the model uses
    (classifier only for the classification head), byte-identical to source.
    """

    def __init__(self, config: HierVitConfig, schema: PlainVitSchema, reused: dict[str, Tensor],
                 downsamplers: list, rel_bias: dict[int, Tensor], merged: bool = False, eps: float = LN_EPS):
        self.config = config
        self.schema = schema
        self.reused = reused
        self.downsamplers = downsamplers
        self.rel_bias = rel_bias
        self.merged = merged
        self.eps = eps
        self.plan = config.resolved_plan()
        self.blocks = [BlockWeights.from_params(reused, i) for i in range(schema.depth)]
        self._pos_cache: dict[tuple[int, int], Tensor] = {}

    @property
    def dim(self) -> int:
        return self.schema.dim

    @property
    def heads(self) -> int:
        return self.schema.heads

    def pos_grid(self, h: int, w: int) -> Tensor:
        """Spatial position embedding resampled to ``[dim, h, w]`` (class row dropped)."""
        if (h, w) not in self._pos_cache:
            _, grid = split_pos_embed(self.reused["pos_embed"], self.schema.has_cls_token)
            self._pos_cache[(h, w)] = np.ascontiguousarray(resize_pos_grid(grid, h, w).transpose(2, 0, 1))
        return self._pos_cache[(h, w)]

    def new_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for s, ds in enumerate(self.downsamplers):
            if isinstance(ds, BranchedDownsampler):
                out[f"{NEW_PREFIX}downsample.{s}.conv.weight"] = ds.conv_w
                out[f"{NEW_PREFIX}downsample.{s}.conv.bias"] = ds.conv_b
            elif isinstance(ds, MergedDownsampler):
                out[f"{NEW_PREFIX}downsample.{s}.fused.weight"] = ds.w
                out[f"{NEW_PREFIX}downsample.{s}.fused.bias"] = ds.b
        for i, table in sorted(self.rel_bias.items()):
            out[f"{NEW_PREFIX}blocks.{i}.attn.rel_pos_bias"] = table
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.reused, **self.new_parameters()}

    def expected_new_shapes(self) -> dict[str, tuple[int, ...]]:
        """The new-parameter inventory the configuration calls for."""
        d = self.dim
        kind = "fused" if self.merged else "conv"
        shapes: dict[str, tuple[int, ...]] = {}
        for s in range(3):
            if s < 2 or self.config.final_pool == "learned":
                shapes[f"{NEW_PREFIX}downsample.{s}.{kind}.weight"] = (d, d, 3, 3)
                shapes[f"{NEW_PREFIX}downsample.{s}.{kind}.bias"] = (d,)
        for i, ws in enumerate(self.plan):
            if ws is not None:
                shapes[f"{NEW_PREFIX}blocks.{i}.attn.rel_pos_bias"] = (self.heads, (2 * ws - 1) ** 2)
        return shapes

    def num_params(self) -> int:
        return sum(int(t.size) for t in self.parameters().values())


def _final_downsampler(kind: str, dim: int):
    if kind == "learned":
        return BranchedDownsampler.zeros(dim)
    if kind == "max2":
        return MaxPoolDownsampler()
    return GlobalPoolDownsampler()


def surgery(plain: Archive, cfg: HierVitConfig | None = None, heads: int | None = None,
            eps: float = LN_EPS) -> HierModel:
    """Build a :class:`HierModel` from a plain ViT archive.

    Every reused tensor is copied verbatim. New downsampler convs and relative
    position bias tables are zero-initialized.
    """
    schema = validate_plain_vit(plain, heads)
    cfg = cfg or HierVitConfig.for_schema(schema)
    cfg.validate(schema)
    keys = list(schema.encoder_shapes())
    if cfg.head == "classification":
        keys += ["head.weight", "head.bias"]
    reused = {k: np.array(plain[k], dtype=np.float32, copy=True) for k in keys}
    d = schema.dim
    downsamplers = [BranchedDownsampler.zeros(d), BranchedDownsampler.zeros(d),
                    _final_downsampler(cfg.final_pool, d)]
    rel_bias = {i: np.zeros((schema.heads, (2 * ws - 1) ** 2), np.float32)
                for i, ws in enumerate(cfg.resolved_plan()) if ws is not None}
    return HierModel(cfg, schema, reused, downsamplers, rel_bias, merged=False, eps=eps)


def merge_model(model: HierModel) -> HierModel:
    """Fold every branched downsampler into a single conv."""
    if model.merged:
        raise ConfigError("model is already merged")
    downsamplers = [merge(ds) if isinstance(ds, BranchedDownsampler) else ds for ds in model.downsamplers]
    return HierModel(model.config, model.schema, model.reused, downsamplers, model.rel_bias,
                     merged=True, eps=model.eps)


# --- forward -------------------------------------------------------------------

def overlap_patch_embed(img: Tensor, model: HierModel, stride: int | None = None,
                        pad: int | None = None) -> Tensor:
    """Reused patch kernel applied with a small stride: ``[3,H,W] -> [dim, H/s, W/s]``."""
    stride = model.config.embed_stride if stride is None else stride
    pad = model.config.embed_pad if pad is None else pad
    if img.ndim != 3 or img.shape[1] % stride or img.shape[2] % stride:
        raise DimensionError(f"image {tuple(img.shape)} spatial size must be divisible by {stride}")
    return conv2d(img, model.reused["patch_embed.proj.weight"], model.reused["patch_embed.proj.bias"],
                  stride=stride, pad=pad)


def stage_downsample(x: Tensor, ds) -> Tensor:
    """Apply a stage downsampler (branched, merged, or pooling-only)."""
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise DimensionError(f"cannot downsample a {x.shape[1]}x{x.shape[2]} map")
    return ds(x)


def hier_block(x: Tensor, model: HierModel, index: int, use_rel_bias: bool = True) -> Tensor:
    """Run block ``index`` on a ``[C,H,W]`` map with its planned attention."""
    c, h, w = x.shape
    weights = model.blocks[index]
    ws = model.plan[index]
    attention = None
    if ws is not None:
        table = model.rel_bias.get(index) if use_rel_bias else None

        def attention(tokens):
            return map_to_tokens(window_attention(tokens_to_map(tokens, h, w), weights, model.heads, ws, table))

    out = vit_block(map_to_tokens(x), weights, model.heads, model.eps, attention)
    return tokens_to_map(out, h, w)


def embed(img: Tensor, model: HierModel) -> Tensor:
    """Overlapping patch embedding plus the resampled position embedding."""
    x = overlap_patch_embed(img, model)
    return x + model.pos_grid(x.shape[1], x.shape[2])


def run_stages(img: Tensor, model: HierModel) -> list[Tensor]:
    """Raw (un-normed) output map of each stage's last block."""
    if img.ndim != 3 or img.shape[1] % STRIDES[-1] or img.shape[2] % STRIDES[-1]:
        raise DimensionError(f"image {tuple(img.shape)} spatial size must be divisible by {STRIDES[-1]}")
    x = embed(img, model)
    outputs = []
    block = 0
    for stage, n_blocks in enumerate(model.config.stage_layout):
        if stage:
            x = stage_downsample(x, model.downsamplers[stage - 1])
        for _ in range(n_blocks):
            x = hier_block(x, model, block)
            block += 1
        outputs.append(x)
    return outputs


def forward_hier(img: Tensor, model: HierModel, head: str | None = None):
    """Classification logits ``[n_classes]`` or a :class:`FeaturePyramid`."""
    head = head or model.config.head
    if head not in HEADS:
        raise ConfigError(f"head must be one of {HEADS}, got {head!r}")
    if head == "classification" and "head.weight" not in model.reused:
        raise ConfigError("model has no classifier weights; surger with head=classification")
    if head == "pyramid" and model.config.final_pool == "gap":
        raise ConfigError("pyramid head is incompatible with final_stage_pool=gap")
    img = as_tensor(img)
    outputs = run_stages(img, model)
    gamma, beta = model.reused["norm.weight"], model.reused["norm.bias"]
    if head == "classification":
        final = norm_map(outputs[-1], gamma, beta, model.eps)
        return linear(global_avg_pool(final), model.reused["head.weight"], model.reused["head.bias"])
    if model.config.tap_norm:
        outputs = [norm_map(o, gamma, beta, model.eps) for o in outputs]
    return FeaturePyramid(*outputs)


# --- weight-reuse audit ----------------------------------------------------------

@dataclass
class ReuseAudit:
    reused_keys: int = 0
    reused_params: int = 0
    encoder_params: int = 0
    new_params: dict[str, tuple[int, ...]] = field(default_factory=dict)
    mismatched: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected_new: list[str] = field(default_factory=list)
    missing_new: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (not self.mismatched and not self.missing and not self.unexpected_new
                and not self.missing_new and self.reused_params == self.encoder_params)

    def summary(self) -> str:
        convs = sum(1 for k in self.new_params if k.endswith(".weight"))
        tables = sum(1 for k in self.new_params if k.endswith("rel_pos_bias"))
        new_total = sum(math.prod(s) for s in self.new_params.values())
        return (f"reused {self.reused_keys} tensors / {self.reused_params} params "
                f"(encoder {self.encoder_params}); new params: {convs} conv + {tables} bias tables "
                f"({new_total} values)")


def reuse_audit(source: Archive, model: HierModel) -> ReuseAudit:
    """Check that every encoder tensor of ``source`` lives in ``model`` byte-identically.

    Also checks that the model's new parameters are exactly the configured
    inventory. Tensors are compared by SHA-256 of their bytes.
    """
    def digest(t) -> str:
        return hashlib.sha256(np.ascontiguousarray(t).tobytes()).hexdigest()

    audit = ReuseAudit()
    params = model.parameters()
    check = list(model.schema.encoder_shapes())
    check += [k for k in ("head.weight", "head.bias") if k in model.reused]
    for key in check:
        if key not in source:
            audit.missing.append(key)
            continue
        is_head = key.startswith("head.")
        if not is_head:
            audit.encoder_params += int(source[key].size)
        if key not in params:
            audit.missing.append(key)
        elif params[key].shape != source[key].shape or digest(params[key]) != digest(source[key]):
            audit.mismatched.append(key)
        elif not is_head:
            audit.reused_keys += 1
            audit.reused_params += int(params[key].size)
    expected = model.expected_new_shapes()
    actual = {k: tuple(v.shape) for k, v in model.new_parameters().items()}
    audit.new_params = actual
    audit.unexpected_new = sorted(k for k in actual if expected.get(k) != actual[k])
    audit.missing_new = sorted(k for k in expected if k not in actual)
    extras = [k for k in params if k not in check and not k.startswith(NEW_PREFIX)]
    audit.unexpected_new += extras
    return audit


# --- serialization -------------------------------------------------------------

def to_archive(model: HierModel) -> Archive:
    archive = Archive(metadata={
        "format": "hier",
        "heads": str(model.heads),
        "eps": repr(model.eps),
        "merged": "true" if model.merged else "false",
        "config": model.config.to_text(),
    })
    for key, value in model.parameters().items():
        archive[key] = value
    return archive


def from_archive(archive: Archive) -> HierModel:
    if archive.metadata.get("format") != "hier" or "config" not in archive.metadata:
        raise SchemaError("archive is not a surgered hierarchical model (missing format=hier/config metadata)")
    cfg = HierVitConfig.from_text(archive.metadata["config"])
    merged = archive.metadata.get("merged", "false") == "true"
    plain = Archive({k: v for k, v in archive.items() if not k.startswith(NEW_PREFIX)},
                    {"heads": archive.metadata.get("heads", "")} if archive.metadata.get("heads") else {})
    schema = validate_plain_vit(plain)
    cfg.validate(schema)
    kind = "fused" if merged else "conv"
    downsamplers = []
    for s in range(3):
        wkey, bkey = f"{NEW_PREFIX}downsample.{s}.{kind}.weight", f"{NEW_PREFIX}downsample.{s}.{kind}.bias"
        if wkey in archive:
            cls = MergedDownsampler if merged else BranchedDownsampler
            downsamplers.append(cls(archive[wkey], archive[bkey]))
        elif s == 2 and cfg.final_pool != "learned":
            downsamplers.append(_final_downsampler(cfg.final_pool, schema.dim))
        else:
            raise SchemaError(f"missing keys: [{wkey!r}]")
    rel_bias = {}
    for i, ws in enumerate(cfg.resolved_plan()):
        if ws is not None:
            key = f"{NEW_PREFIX}blocks.{i}.attn.rel_pos_bias"
            if key not in archive:
                raise SchemaError(f"missing keys: [{key!r}]")
            rel_bias[i] = archive[key]
    eps = float(archive.metadata.get("eps", LN_EPS))
    model = HierModel(cfg, schema, dict(plain.items()), downsamplers, rel_bias, merged=merged, eps=eps)
    unknown = set(archive.keys()) - set(model.parameters())
    if unknown:
        raise SchemaError(f"unexpected keys: {sorted(unknown)}")
    return model
