"""Dataset readers/writers and synthetic data generators.

Native grid file layout (little-endian)::

    b"DDFG" | u16 version | u32 K | u8 rank | u32 dims[rank] | u64 count
    u16 values[count * prod(dims)]          # item-major, C order
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .grid import CLASS_DTYPE, Dataset, GridError

IDX_IMAGE_MAGIC = 0x00000803
GRID_MAGIC = b"DDFG"
GRID_VERSION = 1

EIGHT_GAUSSIANS_BINS = 91
EIGHT_GAUSSIANS_RADIUS = 2.0
EIGHT_GAUSSIANS_STD = 0.1
EIGHT_GAUSSIANS_RANGE = 4.0


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Parse an IDX3 unsigned-byte image file into a ``(N, H, W)`` uint8 array."""
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic", len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x}", 0)
    if len(raw) < 16:
        raise FormatError("truncated IDX header", len(raw))
    count, rows, cols = struct.unpack_from(">III", raw, 4)
    if rows == 0 or cols == 0:
        raise FormatError(f"invalid image size {rows}x{cols}", 8)
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(
            f"IDX payload holds {len(raw) - 16} bytes, header promises {count * rows * cols}",
            min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def binarize(pixels: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Map 8-bit intensities to class 1 iff ``p / 255 >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (pixels.astype(np.float64) / 255.0 >= threshold).astype(CLASS_DTYPE)


def load_idx(path, threshold: float = 0.5, split: str = "train") -> Dataset:
    """Load an IDX image file (optionally gzipped) as binary ``(1, H, W)`` grids."""
    images = parse_idx_images(_read_bytes(path))
    if len(images) == 0:
        raise FormatError("IDX file holds no images", 4)
    return Dataset(binarize(images, threshold)[:, None], 2, split)


def write_idx(images: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    data = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + images.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(data)


def encode_grids(ds: Dataset) -> bytes:
    if len(ds) == 0:
        raise GridError("refusing to write an empty dataset")
    header = GRID_MAGIC + struct.pack("<HIB", GRID_VERSION, ds.num_classes, len(ds.shape))
    header += struct.pack(f"<{len(ds.shape)}I", *ds.shape) + struct.pack("<Q", len(ds))
    return header + ds.values.astype("<u2").tobytes()


def decode_grids(raw: bytes, split: str = "train") -> Dataset:
    if raw[:4] != GRID_MAGIC:
        raise FormatError("bad grid file magic", 0)
    if len(raw) < 11:
        raise FormatError("truncated grid header", len(raw))
    version, k, rank = struct.unpack_from("<HIB", raw, 4)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid file version {version}", 4)
    offset = 11
    if len(raw) < offset + 4 * rank + 8:
        raise FormatError("truncated grid header", len(raw))
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    (count,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    if count == 0:
        raise FormatError("grid file holds zero items", offset - 8)
    n_values = count * int(np.prod(dims))
    if len(raw) != offset + 2 * n_values:
        raise FormatError("grid payload size does not match header", min(len(raw), offset + 2 * n_values))
    values = np.frombuffer(raw, dtype="<u2", offset=offset).reshape(count, *dims)
    try:
        return Dataset(values.astype(CLASS_DTYPE), k, split)
    except GridError as e:
        raise FormatError(str(e), offset) from e


def save_grids(ds: Dataset, path) -> None:
    data = encode_grids(ds)
    with open(path, "wb") as f:
        f.write(data)


def load_grids(path, split: str = "train") -> Dataset:
    with open(path, "rb") as f:
        return decode_grids(f.read(), split)


def load_dataset(path, threshold: float = 0.5, split: str = "train") -> Dataset:
    """Load a native grid file or an IDX image file, sniffing the magic."""
    raw = _read_bytes(path)
    if raw[:4] == GRID_MAGIC:
        return decode_grids(raw, split)
    if len(raw) >= 4 and struct.unpack_from(">I", raw, 0)[0] == IDX_IMAGE_MAGIC:
        images = parse_idx_images(raw)
        return Dataset(binarize(images, threshold)[:, None], 2, split)
    raise FormatError(f"{os.fspath(path)}: unrecognised file magic", 0)


def discretize(v: np.ndarray, bins: int = EIGHT_GAUSSIANS_BINS, half_range: float = EIGHT_GAUSSIANS_RANGE) -> np.ndarray:
    """Uniform binning of ``[-half_range, half_range]`` into ``bins`` classes."""
    v = np.clip(v, -half_range, half_range)
    idx = np.floor((v + half_range) / (2 * half_range) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def eight_gaussian_means(radius: float = EIGHT_GAUSSIANS_RADIUS) -> np.ndarray:
    angles = 2 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_eight_gaussians(n: int, seed: int, split: str = "train", return_modes: bool = False):
    """Quantized mixture of 8 isotropic Gaussians on a circle, K=91 per axis."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    modes = rng.integers(0, 8, size=n)
    points = eight_gaussian_means()[modes] + EIGHT_GAUSSIANS_STD * rng.standard_normal((n, 2))
    ds = Dataset(discretize(points), EIGHT_GAUSSIANS_BINS, split)
    return (ds, modes) if return_modes else ds


def sample_synthetic_maps(
    n: int,
    seed: int,
    num_classes: int = 8,
    height: int = 32,
    width: int = 64,
    split: str = "train",
) -> Dataset:
    """Piecewise-constant segmentation-like maps.

    Each map is a horizontal band layout (sky/road style) with a few axis
    aligned rectangles stamped on top, so neighbouring pixels are strongly
    correlated the way real label maps are.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    out = np.empty((n, 1, height, width), dtype=CLASS_DTYPE)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    for i in range(n):
        cuts = np.sort(rng.integers(1, height, size=2))
        bands = rng.choice(num_classes, size=3, replace=False)
        m = np.where(rows < cuts[0], bands[0], np.where(rows < cuts[1], bands[1], bands[2]))
        m = np.broadcast_to(m, (height, width)).copy()
        for _ in range(rng.integers(1, 5)):
            r0, c0 = rng.integers(0, height), rng.integers(0, width)
            hh, ww = rng.integers(2, height // 2), rng.integers(2, width // 3)
            m[(rows >= r0) & (rows < r0 + hh) & (cols >= c0) & (cols < c0 + ww)] = rng.integers(num_classes)
        out[i, 0] = m
    return Dataset(out, num_classes, split)
