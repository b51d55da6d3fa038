"""IDX ingestion, normalization, stratified splitting and class-session plans."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX element type codes -> big-endian numpy dtypes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.str: k for k, v in _IDX_TYPES.items()}

NORMALIZATION = {
    # MNIST/EMNIST std is deliberately .3801, not the common .3081; override with norm_std
    "mnist": ((0.1307,), (0.3801,)),
    "emnist": ((0.1307,), (0.3801,)),
    "fashion_mnist": ((0.2860,), (0.3530,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2023, 0.1994, 0.2010)),
}


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SplitError(ValueError):
    pass


# -- IDX ---------------------------------------------------------------------------


def parse_idx(payload: bytes) -> np.ndarray:
    """Decode an IDX byte string into an ndarray with the header's extents.

    Image files (magic 0x803) come back as N x 1 x H x W float64; label files
    (0x801) as an int64 vector. Other IDX element types keep their shape.
    """
    if len(payload) < 4:
        raise IdxFormatError("truncated magic number", len(payload))
    zero, code, ndim = struct.unpack(">HBB", payload[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"bad magic number 0x{payload[:4].hex()}", 0)
    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise IdxFormatError("truncated dimension header", len(payload))
    dims = struct.unpack(f">{ndim}I", payload[4:header_end])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    available = len(payload) - header_end
    if available < expected:
        raise IdxFormatError(
            f"payload truncated: expected {expected} data bytes, found {available}", len(payload)
        )
    if available > expected:
        raise IdxFormatError(f"{available - expected} trailing bytes after payload", header_end + expected)
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)), offset=header_end)
    data = data.reshape(dims)

    magic = struct.unpack(">I", payload[:4])[0]
    if magic == IMAGE_MAGIC:
        return data.astype(np.float64)[:, None, :, :]
    if magic == LABEL_MAGIC:
        return data.astype(np.int64)
    return data.astype(dtype.newbyteorder("="))


def serialize_idx(array: np.ndarray, dtype: str = ">u1") -> bytes:
    """Inverse of :func:`parse_idx`; N x 1 x H x W images are written as 3-d IDX."""
    array = np.asarray(array)
    if array.ndim == 4 and array.shape[1] == 1:
        array = array[:, 0]
    dt = np.dtype(dtype)
    code = _IDX_CODES[dt.str]
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array.astype(dt)).tobytes()


def read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def write_idx(path: str, array: np.ndarray, compress: Optional[bool] = None) -> None:
    payload = serialize_idx(array)
    if compress is None:
        compress = path.endswith(".gz")
    with open(path, "wb") as fh:
        fh.write(gzip.compress(payload, mtime=0) if compress else payload)


def read_label_remap(path: str) -> Dict[int, int]:
    """Two whitespace-separated integer columns per line: ``raw_label new_label``."""
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'raw_label new_label'")
            table[int(parts[0])] = int(parts[1])
    return table


# -- image sets --------------------------------------------------------------------


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    normalized: bool = False

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images are not aligned")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "ImageSet":
        return ImageSet(self.images[index], self.labels[index], self.class_count, self.normalized)

    def of_classes(self, classes: Sequence[int]) -> "ImageSet":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))


def load_image_set(images_path: str, labels_path: str, remap: Optional[Dict[int, int]] = None,
                   class_count: Optional[int] = None) -> ImageSet:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 4:
        raise ValueError(f"{images_path} does not hold an image tensor")
    if remap:
        missing = sorted(set(np.unique(labels)) - set(remap))
        if missing:
            raise ValueError(f"label remap table lacks raw labels {missing[:10]}")
        labels = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    count = class_count if class_count is not None else int(labels.max()) + 1 if len(labels) else 0
    return ImageSet(images, labels, count)


def normalize(dataset: ImageSet, mean: Sequence[float], std: Sequence[float]) -> ImageSet:
    """Map raw 0-255 pixels to ``(v/255 - mean) / std`` per channel."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    if np.any(std <= 0):
        raise ValueError("normalization std must be strictly positive")
    if mean.shape[1] != dataset.images.shape[1] or std.shape[1] != dataset.images.shape[1]:
        raise ValueError("normalization constants must match the channel count")
    images = (dataset.images / 255.0 - mean) / std
    if not np.all(np.isfinite(images)):
        raise ValueError("normalization produced non-finite values")
    return ImageSet(images, dataset.labels, dataset.class_count, normalized=True)


def cap_per_class(dataset: ImageSet, limit: int, seed: int) -> ImageSet:
    """Keep at most ``limit`` items per class, chosen reproducibly."""
    gen = rngmod.stream(seed, "cap-per-class")
    keep = []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) > limit:
            idx = np.sort(gen.choice(idx, size=limit, replace=False))
        keep.append(idx)
    return dataset.subset(np.sort(np.concatenate(keep)) if keep else np.array([], dtype=int))


def stratified_split(dataset: ImageSet, fraction: float, seed: int) -> Tuple[ImageSet, ImageSet]:
    """Hold out ``round(fraction * n_c)`` items of every class ``c`` (at least one, at most n_c-1)."""
    if not 0 < fraction < 1:
        raise SplitError("fraction must lie strictly between 0 and 1")
    classes, counts = np.unique(dataset.labels, return_counts=True)
    lonely = classes[counts < 2]
    if len(lonely):
        raise SplitError(f"classes with fewer than 2 items cannot be split: {lonely.tolist()}")
    gen = rngmod.stream(seed, "stratified-split")
    held = []
    for c, n in zip(classes, counts):
        idx = np.flatnonzero(dataset.labels == c)
        k = int(np.clip(np.floor(fraction * n + 0.5), 1, n - 1))
        held.append(gen.permutation(idx)[:k])
    held_idx = np.sort(np.concatenate(held)) if held else np.array([], dtype=int)
    mask = np.ones(len(dataset), dtype=bool)
    mask[held_idx] = False
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(held_idx)


# -- session plan -----------------------------------------------------------------


@dataclass
class SessionPlan:
    base_classes: List[int]
    incremental_order: List[int]
    seed: int

    def __post_init__(self):
        base, inc = set(self.base_classes), set(self.incremental_order)
        if base & inc:
            raise ValueError("base and incremental classes overlap")
        if len(inc) != len(self.incremental_order) or len(base) != len(self.base_classes):
            raise ValueError("duplicate class in session plan")

    @property
    def all_classes(self) -> List[int]:
        return sorted(self.base_classes + self.incremental_order)

    def truncated(self, sessions: Optional[int]) -> "SessionPlan":
        if sessions is None:
            return self
        return SessionPlan(list(self.base_classes), list(self.incremental_order[:sessions]), self.seed)

    def describe(self) -> str:
        lines = [f"seed: {self.seed}", f"base classes: {' '.join(map(str, self.base_classes))}"]
        for i, c in enumerate(self.incremental_order, 1):
            lines.append(f"session {i}: class {c}")
        return "\n".join(lines)


def make_session_plan(class_count: int, seed: int) -> SessionPlan:
    """Random half of the classes as base, remaining classes shuffled into single-class sessions."""
    if class_count < 4:
        raise ValueError("a session plan needs at least 4 classes")
    gen = rngmod.stream(seed, "session-plan")
    order = gen.permutation(class_count)
    half = class_count // 2
    return SessionPlan(sorted(int(c) for c in order[:half]), [int(c) for c in order[half:]], seed)


# -- augmentation -----------------------------------------------------------------


def augment(images: np.ndarray, pad: int, flip_probability: float,
            rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop back to size, then horizontal flip with the given probability."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if not 0 <= flip_probability <= 1:
        raise ValueError("flip probability must lie in [0, 1]")
    images = np.asarray(images, dtype=np.float64)
    n, _, h, w = images.shape
    out = images.copy()
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    if flip_probability > 0:
        flips = rng.random(n) < flip_probability
        out[flips] = out[flips][..., ::-1]
    return out


def horizontal_flip(images: np.ndarray) -> np.ndarray:
    return np.asarray(images)[..., ::-1].copy()
