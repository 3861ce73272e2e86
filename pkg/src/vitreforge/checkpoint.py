"""NTA-v1 named-tensor archives and plain-ViT checkpoint validation.

File layout (all integers little-endian)::

    0..3        magic b"NTA1"
    4..11       u64 index length L
    12..12+L    UTF-8 index, one newline-terminated record per line
    12+L..      payload; tensor offsets are relative to here, 64-byte aligned

Tensor records are ``key<TAB>f32<TAB>d0,d1,...<TAB>offset<TAB>nbytes``.
Metadata records come first and read ``@meta<TAB>key<TAB>value`` with
backslash escapes for backslash, tab and newline in the value.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, SchemaError, UnsupportedDtypeError

MAGIC = b"NTA1"
ALIGN = 64
_HEADER = struct.Struct("<4sQ")
_META_TAG = "@meta"
_WRITE_CHUNK = 1 << 24

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


def _escape(value: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in value)


def _unescape(value: str) -> str:
    return re.sub(r"\\[\\tnr]", lambda m: _UNESCAPES[m.group(0)], value)


def _check_key(key: str, what: str = "key") -> None:
    if not isinstance(key, str) or not key:
        raise FormatError(f"{what} must be a nonempty string, got {key!r}")
    if not key.isascii() or any(c in key for c in "\t\n\r"):
        raise FormatError(f"{what} {key!r} must be ASCII without tabs or newlines")
    if key.startswith("@"):
        raise FormatError(f"{what} {key!r} may not start with '@'")


class Archive:
    """Ordered ``key -> f32 tensor`` map plus string metadata."""

    def __init__(self, entries=None, metadata=None):
        self.entries: dict[str, np.ndarray] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        for key, value in (entries or {}).items():
            self[key] = value

    def __setitem__(self, key: str, value) -> None:
        _check_key(key)
        arr = np.asarray(value)
        if arr.dtype != np.float32:
            raise UnsupportedDtypeError(f"{key}: only f32 tensors are supported, got {arr.dtype}")
        self.entries[key] = arr

    def __getitem__(self, key: str) -> np.ndarray:
        return self.entries[key]

    def __delitem__(self, key: str) -> None:
        del self.entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def num_params(self) -> int:
        return sum(int(t.size) for t in self.entries.values())

    def copy(self) -> "Archive":
        return Archive({k: v.copy() for k, v in self.entries.items()}, self.metadata)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Archive):
            return NotImplemented
        if list(self.entries) != list(other.entries) or self.metadata != other.metadata:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values()))

    def __repr__(self) -> str:
        return f"Archive({len(self)} tensors, {self.num_params()} params, metadata={sorted(self.metadata)})"


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _layout(archive: Archive) -> tuple[bytes, list[tuple[str, np.ndarray, int]]]:
    lines = []
    for key, value in archive.metadata.items():
        _check_key(key, "metadata key")
        lines.append(f"{_META_TAG}\t{key}\t{_escape(str(value))}\n")
    placed = []
    offset = 0
    for key, tensor in archive.items():
        if tensor.ndim == 0 or 0 in tensor.shape:
            raise FormatError(f"{key}: tensors need at least one dimension and no zero extents")
        nbytes = tensor.size * 4
        dims = ",".join(str(d) for d in tensor.shape)
        lines.append(f"{key}\tf32\t{dims}\t{offset}\t{nbytes}\n")
        placed.append((key, tensor, offset))
        offset = _align(offset + nbytes)
    return "".join(lines).encode("utf-8"), placed


def _write_sparse(f, buf: memoryview) -> None:
    # All-zero chunks become holes; the caller truncates to fix the final size.
    for start in range(0, len(buf), _WRITE_CHUNK):
        chunk = buf[start:start + _WRITE_CHUNK]
        if np.frombuffer(chunk, dtype=np.uint8).any():
            f.write(chunk)
        else:
            f.seek(len(chunk), 1)


def save_archive(archive: Archive, path) -> None:
    """Write ``archive`` as NTA-v1. Output bytes depend only on the archive."""
    index, placed = _layout(archive)
    payload_start = _HEADER.size + len(index)
    end = payload_start
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, len(index)))
        f.write(index)
        for key, tensor, offset in placed:
            f.seek(payload_start + offset)
            data = np.ascontiguousarray(tensor, dtype="<f4")
            _write_sparse(f, memoryview(data).cast("B"))
            end = payload_start + offset + data.nbytes
        f.truncate(end)


@dataclass(frozen=True)
class _Record:
    key: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int


def _parse_index(text: str) -> tuple[dict[str, str], list[_Record]]:
    metadata: dict[str, str] = {}
    records: list[_Record] = []
    seen: set[str] = set()
    if text and not text.endswith("\n"):
        raise FormatError("index does not end with a newline")
    for lineno, line in enumerate(text.split("\n")[:-1] if text else [], start=1):
        fields = line.split("\t")
        if fields[0] == _META_TAG:
            if len(fields) != 3:
                raise FormatError(f"index line {lineno}: malformed metadata record")
            if fields[1] in metadata:
                raise FormatError(f"index line {lineno}: duplicate metadata key {fields[1]!r}")
            metadata[fields[1]] = _unescape(fields[2])
            continue
        if len(fields) != 5:
            raise FormatError(f"index line {lineno}: expected 5 tab-separated fields, got {len(fields)}")
        key, dtype, dims, offset, nbytes = fields
        if not key:
            raise FormatError(f"index line {lineno}: empty key")
        if key in seen:
            raise FormatError(f"index line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if dtype != "f32":
            raise UnsupportedDtypeError(f"{key}: unsupported dtype {dtype!r}")
        try:
            shape = tuple(int(d) for d in dims.split(","))
            offset_i, nbytes_i = int(offset), int(nbytes)
        except ValueError as exc:
            raise FormatError(f"index line {lineno}: bad integer field ({exc})") from None
        if any(d <= 0 for d in shape):
            raise FormatError(f"{key}: non-positive dimension in shape {shape}")
        if nbytes_i != 4 * math.prod(shape):
            raise CorruptionError(f"{key}: nbytes {nbytes_i} does not match shape {shape}")
        if offset_i < 0 or offset_i % ALIGN:
            raise CorruptionError(f"{key}: offset {offset_i} is not {ALIGN}-byte aligned")
        records.append(_Record(key, shape, offset_i, nbytes_i))
    return metadata, records


def load_archive(path, mmap: bool = False) -> Archive:
    """Read an NTA-v1 file.

    With ``mmap=True`` tensors are read-only memory maps instead of in-memory
    copies, which keeps multi-gigabyte archives cheap to open.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size or head[:4] != MAGIC:
            raise FormatError(f"{path}: not an NTA-v1 file (bad magic)")
        _, index_len = _HEADER.unpack(head)
        if _HEADER.size + index_len > size:
            raise CorruptionError(f"{path}: index length {index_len} exceeds file size {size}")
        try:
            text = f.read(index_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: index is not valid UTF-8 ({exc})") from None
        metadata, records = _parse_index(text)
        payload_start = _HEADER.size + index_len
        archive = Archive(metadata=metadata)
        for rec in records:
            start = payload_start + rec.offset
            if start + rec.nbytes > size:
                raise CorruptionError(
                    f"{rec.key}: payload [{start}, {start + rec.nbytes}) runs past end of file ({size} bytes)")
            if mmap:
                data = np.memmap(path, dtype="<f4", mode="r", offset=start, shape=rec.shape)
            else:
                f.seek(start)
                data = np.fromfile(f, dtype="<f4", count=rec.nbytes // 4).reshape(rec.shape)
                if data.size * 4 != rec.nbytes:
                    raise CorruptionError(f"{rec.key}: short read")
            archive.entries[rec.key] = data.view(np.float32) if data.dtype != np.float32 else data
    return archive


# --- plain ViT schema --------------------------------------------------------

BLOCK_PARAMS = (
    "norm1.weight", "norm1.bias",
    "attn.qkv.weight", "attn.qkv.bias",
    "attn.proj.weight", "attn.proj.bias",
    "norm2.weight", "norm2.bias",
    "mlp.fc1.weight", "mlp.fc1.bias",
    "mlp.fc2.weight", "mlp.fc2.bias",
)
_BLOCK_KEY = re.compile(r"^blocks\.(\d+)\.(.+)$")


@dataclass(frozen=True)
class PlainVitSchema:
    depth: int
    dim: int
    heads: int
    mlp_hidden: int
    patch: int
    grid: int
    has_cls_token: bool = False
    n_classes: int | None = None
    in_chans: int = 3

    @property
    def mlp_ratio(self) -> float:
        return self.mlp_hidden / self.dim

    @property
    def img(self) -> int:
        return self.grid * self.patch

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        d, h = self.dim, self.mlp_hidden
        return {
            "norm1.weight": (d,), "norm1.bias": (d,),
            "attn.qkv.weight": (3 * d, d), "attn.qkv.bias": (3 * d,),
            "attn.proj.weight": (d, d), "attn.proj.bias": (d,),
            "norm2.weight": (d,), "norm2.bias": (d,),
            "mlp.fc1.weight": (h, d), "mlp.fc1.bias": (h,),
            "mlp.fc2.weight": (d, h), "mlp.fc2.bias": (d,),
        }

    def encoder_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every encoder key with its shape, in canonical order (classifier excluded)."""
        d = self.dim
        tokens = self.grid * self.grid + (1 if self.has_cls_token else 0)
        shapes: dict[str, tuple[int, ...]] = {
            "patch_embed.proj.weight": (d, self.in_chans, self.patch, self.patch),
            "patch_embed.proj.bias": (d,),
        }
        if self.has_cls_token:
            shapes["cls_token"] = (1, 1, d)
        shapes["pos_embed"] = (1, tokens, d)
        for i in range(self.depth):
            for name, shape in self.block_shapes().items():
                shapes[f"blocks.{i}.{name}"] = shape
        shapes["norm.weight"] = (d,)
        shapes["norm.bias"] = (d,)
        return shapes

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = self.encoder_shapes()
        if self.n_classes is not None:
            shapes["head.weight"] = (self.n_classes, self.dim)
            shapes["head.bias"] = (self.n_classes,)
        return shapes

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.expected_shapes().values())


def _infer_heads(archive: Archive, dim: int, heads: int | None) -> int:
    if heads is None and "heads" in archive.metadata:
        try:
            heads = int(archive.metadata["heads"])
        except ValueError:
            raise SchemaError(f"metadata heads={archive.metadata['heads']!r} is not an integer") from None
    if heads is None:
        # 64-wide heads is the ViT-S/B/L/H convention
        if dim % 64:
            raise SchemaError(f"cannot infer head count for dim {dim}; pass heads or set metadata 'heads'")
        heads = dim // 64
    if heads < 1 or dim % heads:
        raise SchemaError(f"dim {dim} is not divisible by heads {heads}")
    return heads


def validate_plain_vit(archive: Archive, heads: int | None = None) -> PlainVitSchema:
    """Infer and check the plain ViT schema of ``archive``.

    Depth comes from the block keys, width from the patch projection, the
    head count from ``heads``, then ``metadata['heads']``, then ``dim // 64``.
    """
    if "patch_embed.proj.weight" not in archive:
        raise SchemaError("missing keys: ['patch_embed.proj.weight']")
    proj = archive["patch_embed.proj.weight"]
    if proj.ndim != 4 or proj.shape[2] != proj.shape[3]:
        raise SchemaError(f"patch_embed.proj.weight must be [dim,C,p,p], got {proj.shape}")
    dim, in_chans, patch = proj.shape[0], proj.shape[1], proj.shape[2]

    indices = {int(m.group(1)) for k in archive if (m := _BLOCK_KEY.match(k))}
    if not indices:
        raise SchemaError("no transformer blocks found (expected blocks.{i}.* keys)")
    depth = max(indices) + 1

    if "pos_embed" not in archive:
        raise SchemaError("missing keys: ['pos_embed']")
    pos = archive["pos_embed"]
    if pos.ndim != 3 or pos.shape[0] != 1 or pos.shape[2] != dim:
        raise SchemaError(f"pos_embed must be [1, N, {dim}], got {pos.shape}")
    has_cls = "cls_token" in archive
    spatial = pos.shape[1] - (1 if has_cls else 0)
    grid = math.isqrt(spatial) if spatial > 0 else 0
    if grid * grid != spatial or grid == 0:
        hint = " (class-token slot present but cls_token missing?)" if not has_cls else ""
        raise SchemaError(f"pos_embed has {pos.shape[1]} tokens, not a square grid{hint}")

    fc1 = archive.entries.get("blocks.0.mlp.fc1.weight")
    mlp_hidden = fc1.shape[0] if fc1 is not None and fc1.ndim == 2 else 4 * dim

    head_keys = {"head.weight", "head.bias"} & set(archive.keys())
    n_classes = None
    if head_keys:
        if len(head_keys) != 2:
            missing = sorted({"head.weight", "head.bias"} - head_keys)
            raise SchemaError(f"missing keys: {missing}")
        n_classes = archive["head.weight"].shape[0]

    schema = PlainVitSchema(
        depth=depth, dim=dim, heads=_infer_heads(archive, dim, heads), mlp_hidden=mlp_hidden,
        patch=patch, grid=grid, has_cls_token=has_cls, n_classes=n_classes, in_chans=in_chans)

    expected = schema.expected_shapes()
    missing = [k for k in expected if k not in archive]
    if missing:
        raise SchemaError(f"missing keys: {missing}")
    unexpected = [k for k in archive if k not in expected]
    if unexpected:
        raise SchemaError(f"unexpected keys: {unexpected}")
    bad = [f"{k}: {tuple(archive[k].shape)} != {shape}"
           for k, shape in expected.items() if tuple(archive[k].shape) != shape]
    if bad:
        raise SchemaError("inconsistent shapes: " + "; ".join(bad))
    return schema
