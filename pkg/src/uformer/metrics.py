"""PSNR, SSIM, luma conversion and overlap-tiled inference.  All metrics run in float64."""

from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from .tensor import DimensionError

log = logging.getLogger(__name__)

Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


def as_image(a) -> np.ndarray:
    """Coerce to a ``C x H x W`` float64 array clamped to [0, 1]."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DimensionError(f"expected a 1- or 3-channel C x H x W image, got {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with the 1-D kernel ``g``."""
    k = len(g)
    H, W = img.shape
    rows = np.zeros((H - k + 1, W))
    for i in range(k):
        rows += g[i] * img[i : i + H - k + 1]
    out = np.zeros((H - k + 1, W - k + 1))
    for j in range(k):
        out += g[j] * rows[:, j : j + W - k + 1]
    return out


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = gaussian_window(size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < 11:
        raise ValueError(f"image {a.shape[-2:]} smaller than the 11x11 SSIM window")
    return float(np.mean([ssim_map(a[c], b[c], peak).mean() for c in range(a.shape[0])]))


def rgb_to_y(img) -> np.ndarray:
    """Full-range BT.601 luma, ``3 x H x W -> 1 x H x W``."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"rgb_to_y needs 3 channels, got shape {arr.shape}")
    return np.tensordot(Y_WEIGHTS, arr, axes=(0, 0))[None]


def tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    if n <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _ramp(length: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    w = np.ones(length)
    if overlap > 0:
        r = np.arange(1, overlap + 1) / (overlap + 1)
        if not at_start:
            w[:overlap] = np.minimum(w[:overlap], r)
        if not at_end:
            w[-overlap:] = np.minimum(w[-overlap:], r[::-1])
    return w


def tiled_inference(
    restore: Callable[[np.ndarray], np.ndarray],
    img: np.ndarray,
    tile: int,
    overlap: int = 0,
    min_tile: int = 1,
) -> np.ndarray:
    """Restore ``img`` tile by tile, blending overlaps with linear ramps.

    Tiles are folded into the output as a running weighted mean, so a tile
    equal to the current estimate leaves it bitwise unchanged.
    """
    img = np.asarray(img)
    if overlap < 0 or tile <= overlap:
        raise ValueError(f"need tile > overlap >= 0, got tile={tile}, overlap={overlap}")
    C, H, W = img.shape
    if H <= tile and W <= tile:
        return restore(img)
    if tile < min_tile:
        raise ValueError(f"tile {tile} is below the model minimum {min_tile}")
    ys, xs = tile_starts(H, tile, overlap), tile_starts(W, tile, overlap)
    log.info("tiled inference: %d x %d = %d tiles of %d px (overlap %d)", len(ys), len(xs), len(ys) * len(xs), tile, overlap)
    acc = np.zeros(img.shape, dtype=np.float64)
    wsum = np.zeros((H, W))
    for y in ys:
        wy = _ramp(min(tile, H), overlap, y == 0, y + tile >= H)
        for x in xs:
            wx = _ramp(min(tile, W), overlap, x == 0, x + tile >= W)
            out = np.asarray(restore(img[:, y : y + tile, x : x + tile]), dtype=np.float64)
            w = np.outer(wy, wx)
            sl = (slice(y, y + tile), slice(x, x + tile))
            new_sum = wsum[sl] + w
            acc[(slice(None),) + sl] += (w / new_sum) * (out - acc[(slice(None),) + sl])
            wsum[sl] = new_sum
    return acc.astype(img.dtype)


def count_tiles(H: int, W: int, tile: int, overlap: int) -> int:
    if H <= tile and W <= tile:
        return 1
    return len(tile_starts(H, tile, overlap)) * len(tile_starts(W, tile, overlap))
