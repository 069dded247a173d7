"""PNG, depth and point-record files shared by the dataset, renderer and CLI."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap [0, 1] values onto the 8-bit grid used by PNG storage."""
    return (to_uint8(img) / 255.0).astype(np.float32)


def write_png(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]; RGB images come back (H, W, 3), masks (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return (arr / 255.0).astype(np.float32)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(struct.pack("<II", h, w) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    h, w = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 4 * h * w:
        raise ValueError(f"{path}: depth payload does not match header {h}x{w}")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)


def write_records(path, records: np.ndarray) -> None:
    """Count (uint32) followed by rows of float32 values."""
    records = np.ascontiguousarray(records, dtype="<f4")
    Path(path).write_bytes(struct.pack("<II", *records.shape) + records.tobytes())


def read_records(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n, k = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 4 * n * k:
        raise ValueError(f"{path}: record payload does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, k).astype(np.float32)
