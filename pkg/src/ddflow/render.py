"""Binary PPM (P6) output for samples and density maps."""

from __future__ import annotations

import colorsys

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=-1)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def palette(num_classes: int) -> np.ndarray:
    if num_classes == 2:
        return np.array([[0, 0, 0], [255, 255, 255]], dtype=np.uint8)
    hues = np.arange(num_classes) / num_classes
    return np.array([[int(255 * c) for c in colorsys.hsv_to_rgb(hh, 0.65, 0.95)] for hh in hues], dtype=np.uint8)


def tile_images(values: np.ndarray, num_classes: int, columns: int = 10, pad: int = 1) -> np.ndarray:
    """Mosaic of ``(N, C, H, W)`` grids (first channel shown) as an RGB array."""
    imgs = palette(num_classes)[np.asarray(values)[:, 0]]
    n, h, w, _ = imgs.shape
    cols = min(columns, n)
    rows = -(-n // cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 128, dtype=np.uint8)
    for i, img in enumerate(imgs):
        r, c = divmod(i, cols)
        out[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return out


def heatmap(values: np.ndarray) -> np.ndarray:
    """Grayscale image of a non-negative 2D array, scaled to its maximum; row 0 at the top."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max() if v.max() > 0 else 1.0
    return np.round(255 * v / peak).astype(np.uint8)


def histogram_2d(points: np.ndarray, bins: int) -> np.ndarray:
    """Counts over a ``bins x bins`` grid; rows are the second coordinate, flipped so up is positive."""
    hist = np.zeros((bins, bins))
    np.add.at(hist, (np.asarray(points[:, 1]), np.asarray(points[:, 0])), 1)
    return hist[::-1]
