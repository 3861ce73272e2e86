"""Binary PPM (P6, maxval 255) decoding and channel normalization."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

# ImageNet convention; preprocessing is a user choice, not part of the model
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _header_fields(data: bytes, count: int) -> tuple[list[bytes], int]:
    fields, pos = [], 0
    while len(fields) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("PPM header is truncated")
        fields.append(data[start:pos])
    return fields, pos


def decode_ppm_bytes(data: bytes) -> np.ndarray:
    """Decode P6 bytes to ``[3, H, W]`` float32 in [0, 1], RGB order."""
    fields, pos = _header_fields(data, 4)
    if fields[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {fields[0]!r}, expected b'P6')")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("PPM header has non-integer size or maxval") from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"bad PPM size {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("PPM header is not followed by a single whitespace byte")
    pixels = data[pos + 1:]
    need = width * height * 3
    if len(pixels) < need:
        raise FormatError(f"PPM pixel payload truncated: {len(pixels)} of {need} bytes")
    img = np.frombuffer(pixels[:need], dtype=np.uint8).reshape(height, width, 3)
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def decode_ppm(path) -> np.ndarray:
    return decode_ppm_bytes(Path(path).read_bytes())


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode ``[3, H, W]`` floats in [0, 1] (or uint8) as P6 bytes."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.transpose(1, 2, 0).tobytes()


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Per-channel ``(x - mean) / std``."""
    mean = np.asarray(mean, np.float32).reshape(3, 1, 1)
    std = np.asarray(std, np.float32).reshape(3, 1, 1)
    if np.any(std == 0):
        raise ValueError("std must be nonzero")
    return (img - mean) / std
