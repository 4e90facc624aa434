"""On-disk formats: float maps, 8-bit RGB images, JSON records and hashes.

Float map layout (little endian)::

    b"UQDM" | width:u32 | height:u32 | width*height float32, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

MAGIC = b"UQDM"
_HEADER = struct.Struct("<4sII")

PathLike = Union[str, Path]


class MapFormatError(ValueError):
    """Raised for malformed float map files."""


def encode_map(values) -> bytes:
    arr = np.asarray(getattr(values, "values", values))
    if arr.ndim != 2:
        raise ValueError(f"float maps are 2-D, got shape {arr.shape}")
    h, w = arr.shape
    return _HEADER.pack(MAGIC, w, h) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_map(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise MapFormatError("file shorter than the map header")
    magic, w, h = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MapFormatError(f"bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != w * h * 4:
        raise MapFormatError(f"size mismatch: header says {w}x{h} "
                             f"({w * h * 4} bytes) but payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float32)


def write_map(path: PathLike, values) -> Path:
    path = Path(path)
    path.write_bytes(encode_map(values))
    return path


def read_map(path: PathLike) -> np.ndarray:
    return decode_map(Path(path).read_bytes())


def write_image(path: PathLike, pixels: np.ndarray) -> Path:
    """Store ``HxWx3`` floats in [0, 1] as an 8-bit RGB PNG."""
    path = Path(path)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")
    return path


def read_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, matching what ``read_image`` would return."""
    return to_uint8(pixels).astype(np.float32) / 255.0


def write_json(path: PathLike, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: PathLike):
    return json.loads(Path(path).read_text())


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path: PathLike) -> str:
    return sha256_bytes(Path(path).read_bytes())


def hash_tree(root: PathLike, exclude=()) -> dict:
    """Relative path -> sha256 for every file below ``root``."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and not any(Path(rel).match(pat) for pat in exclude):
            out[rel] = sha256_file(p)
    return out
