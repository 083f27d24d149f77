"""Dataset ingestion: IDX files (optionally gzipped) and per-class PNG folders."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

# IDX type codes -> numpy big-endian dtypes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class DatasetHandle:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX array: 2 zero bytes, type code, rank, big-endian dims, data."""
    path = Path(path)
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated at byte {len(buf)}, magic needs 4 bytes")
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError(f"{path}: bad magic {buf[:4].hex()} at byte 0")
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX type code 0x{code:02x} at byte 2")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated at byte {len(buf)}, dimension header needs {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    dtype = _IDX_TYPES[code]
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"{path}: truncated at byte {len(buf)}, header declares {need} bytes")
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} unexpected trailing bytes at byte {need}")
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims)


def _scale(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind in "ui":
        return arr.astype(np.float32) / np.float32(255.0)
    return arr.astype(np.float32)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> DatasetHandle:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 dims, found {images.ndim}")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected 1 dim, found {labels.ndim}")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return DatasetHandle(_scale(images), labels, num_classes, split)


def load_png_dir(root, num_classes: int | None = None, split: str = "train") -> DatasetHandle:
    """Images from ``root/<class index>/*.png``, converted to grayscale."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    images, labels = [], []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if not sub.name.isdigit():
            raise DataError(f"{sub}: class directories must be named by class index")
        cls = int(sub.name)
        if num_classes is not None and cls >= num_classes:
            raise DataError(f"{sub}: class {cls} outside [0, {num_classes})")
        for png in sorted(sub.glob("*.png")):
            with Image.open(png) as im:
                images.append(np.asarray(im.convert("L")))
            labels.append(cls)
    if not images:
        raise DataError(f"{root}: no PNG images found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{root}: images have differing sizes {sorted(shapes)}")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels_arr.max()) + 1
    return DatasetHandle(_scale(np.stack(images)[:, None]), labels_arr, num_classes, split)


def load_dataset(path, format: str = "idx", labels_path=None, num_classes=None, split="train") -> DatasetHandle:
    if format == "idx":
        if labels_path is None:
            raise DataError("IDX datasets need both an images and a labels file")
        return load_idx(path, labels_path, num_classes, split)
    if format == "png-dir":
        return load_png_dir(path, num_classes, split)
    raise DataError(f"unknown dataset format {format!r}")
