"""Synthetic clean images, degradations and dihedral augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .model import ConfigError

DEGRADATIONS = ("gaussian_noise", "box_blur", "rain_streaks")


@dataclass
class Degradation:
    kind: str = "gaussian_noise"
    sigma: float = 0.1
    blur_size: int = 3
    rain_count: int = 40
    rain_length: int = 8
    rain_angle: float = 75.0
    rain_intensity: float = 0.3

    def validate(self) -> None:
        if self.kind not in DEGRADATIONS:
            raise ConfigError(f"unknown degradation {self.kind!r}; expected one of {DEGRADATIONS}")
        if self.sigma < 0 or self.blur_size < 1 or self.rain_count < 0 or self.rain_length < 1:
            raise ConfigError(f"invalid degradation parameters: {self}")


def synth_degrade(clean: np.ndarray, spec: Degradation, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """Degrade a ``C x H x W`` image in [0, 1]; deterministic for a seeded ``rng``."""
    spec.validate()
    img = np.asarray(clean, dtype=np.float64)
    if spec.kind == "gaussian_noise":
        out = img + spec.sigma * rng.standard_normal(img.shape) if spec.sigma > 0 else img.copy()
    elif spec.kind == "box_blur":
        k = spec.blur_size
        out = img.copy() if k == 1 else uniform_filter(img, size=(1, k, k), mode="reflect")
    else:
        out = img + _rain_layer(img.shape[1:], spec, rng)[None]
    return np.clip(out, 0.0, 1.0) if clip else out


def _rain_layer(shape: tuple[int, int], spec: Degradation, rng: np.random.Generator) -> np.ndarray:
    H, W = shape
    layer = np.zeros((H, W))
    theta = np.deg2rad(spec.rain_angle)
    dy, dx = np.sin(theta), np.cos(theta)
    steps = np.arange(spec.rain_length)
    for _ in range(spec.rain_count):
        y0, x0 = rng.uniform(0, H), rng.uniform(0, W)
        ys = np.round(y0 + steps * dy).astype(int) % H
        xs = np.round(x0 + steps * dx).astype(int) % W
        layer[ys, xs] = spec.rain_intensity
    return layer


def dihedral(img: np.ndarray, index: int) -> np.ndarray:
    """One of the 8 square symmetries: ``index % 4`` quarter turns, then a
    horizontal flip when ``index >= 4``."""
    out = np.rot90(img, k=index % 4, axes=(-2, -1))
    if index >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(clean: np.ndarray, degraded: np.ndarray, rng: np.random.Generator, index: int | None = None):
    """Apply the same random dihedral transform to a clean/degraded pair."""
    if index is None:
        index = int(rng.integers(8))
    H, W = clean.shape[-2:]
    if H != W and index % 2 == 1:
        raise ConfigError(f"rotation by 90/270 degrees needs a square patch, got {H}x{W}")
    return dihedral(clean, index), dihedral(degraded, index)


def synthetic_images(n: int, size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth test images: low-frequency colour gradients plus a few
    soft-edged discs and rectangles.  Returns ``n x C x size x size`` in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, channels, size, size))
    for i in range(n):
        img = np.zeros((channels, size, size))
        for c in range(channels):
            fy, fx = rng.uniform(0.2, 1.5, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            img[c] = 0.5 + 0.2 * np.sin(2 * np.pi * fy * yy + ph[0]) * np.cos(2 * np.pi * fx * xx + ph[1])
        for _ in range(rng.integers(2, 5)):
            colour = rng.uniform(-0.3, 0.3, size=channels)
            cy, cx = rng.uniform(0, 1, size=2)
            if rng.random() < 0.5:
                r = rng.uniform(0.1, 0.35)
                d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
                shape = 1.0 / (1.0 + np.exp((d - r) * size / 1.5))
            else:
                hy, hx = rng.uniform(0.1, 0.3, size=2)
                shape = (1.0 / (1.0 + np.exp((np.abs(yy - cy) - hy) * size / 1.5))) * (
                    1.0 / (1.0 + np.exp((np.abs(xx - cx) - hx) * size / 1.5))
                )
            img += colour[:, None, None] * shape[None]
        out[i] = np.clip(img, 0.05, 0.95)
    return out


def load_png_dir(path, size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``size x size`` crops from the PNG files under ``path``."""
    from .io import read_png

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise ConfigError(f"no PNG files found in {path}")
    images = [read_png(f) for f in files]
    crops = []
    for _ in range(count):
        img = images[int(rng.integers(len(images)))]
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        H, W = img.shape[1:]
        if H < size or W < size:
            raise ConfigError(f"image smaller than patch size {size}")
        y, x = int(rng.integers(H - size + 1)), int(rng.integers(W - size + 1))
        crops.append(img[:, y : y + size, x : x + size])
    return np.stack(crops)
