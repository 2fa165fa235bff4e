"""Window partition/reverse, cyclic shifts, shift masks and relative-position indices.

Public functions take channel-first maps (``C x H x W`` or ``B x C x H x W``).
The ``*_hwc`` variants work on channel-last maps ``B x H x W x C`` and are what
the attention blocks use internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import DimensionError, Tensor, pad_reflect, permute, reshape, roll

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowGrid:
    H: int
    W: int
    M: int
    pad_h: int = 0
    pad_w: int = 0
    batch: int = 1

    @property
    def rows(self) -> int:
        return (self.H + self.pad_h) // self.M

    @property
    def cols(self) -> int:
        return (self.W + self.pad_w) // self.M

    @property
    def N(self) -> int:
        return self.rows * self.cols


def padding_for(n: int, M: int) -> int:
    return (-n) % M


def make_grid(H: int, W: int, M: int, batch: int = 1) -> WindowGrid:
    if M < 1:
        raise ValueError(f"window size must be >= 1, got {M}")
    return WindowGrid(H, W, M, padding_for(H, M), padding_for(W, M), batch)


def pad_hwc(x: Tensor, grid: WindowGrid) -> Tensor:
    return pad_reflect(x, {1: (0, grid.pad_h), 2: (0, grid.pad_w)})


def crop_hwc(x: Tensor, grid: WindowGrid) -> Tensor:
    if grid.pad_h or grid.pad_w:
        return x[:, : grid.H, : grid.W, :]
    return x


def partition_hwc(x: Tensor, M: int) -> Tensor:
    """``B x Hp x Wp x C`` (divisible) -> ``(B*N) x M^2 x C``, row-major windows."""
    B, H, W, C = x.shape
    if H % M or W % M:
        raise DimensionError(f"extents {H}x{W} not divisible by window {M}")
    t = reshape(x, (B, H // M, M, W // M, M, C))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (B * (H // M) * (W // M), M * M, C))


def reverse_hwc(w: Tensor, M: int, Hp: int, Wp: int) -> Tensor:
    nw = (Hp // M) * (Wp // M)
    if w.ndim != 3 or w.shape[1] != M * M or w.shape[0] % nw:
        raise DimensionError(f"windows {w.shape} inconsistent with {Hp}x{Wp} grid of window {M}")
    B = w.shape[0] // nw
    C = w.shape[2]
    t = reshape(w, (B, Hp // M, Wp // M, M, M, C))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (B, Hp, Wp, C))


def _chw_to_hwc(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return permute(reshape(x, (1,) + x.shape), (0, 2, 3, 1)), True
    if x.ndim == 4:
        return permute(x, (0, 2, 3, 1)), False
    raise DimensionError(f"expected C x H x W or B x C x H x W, got {x.shape}")


def window_partition(x: Tensor, M: int) -> tuple[Tensor, WindowGrid]:
    """Split a feature map into flattened, channel-last ``M x M`` windows.

    Non-divisible extents are reflect-padded on the bottom/right; the padding
    is recorded in the returned grid so :func:`window_reverse` can crop it.
    Padding wider than the map folds back and forth across it.
    """
    t, _ = _chw_to_hwc(x)
    B, H, W, _ = t.shape
    grid = make_grid(H, W, M, B)
    return partition_hwc(pad_hwc(t, grid), M), grid


def window_reverse(w: Tensor, grid: WindowGrid, batched: bool = False) -> Tensor:
    """Inverse of :func:`window_partition`, cropping any padding.

    Returns ``C x H x W`` unless ``batched`` (or the grid's batch exceeds 1).
    """
    if w.shape[0] != grid.N * grid.batch:
        raise DimensionError(f"{w.shape[0]} windows but grid holds {grid.N * grid.batch}")
    t = reverse_hwc(w, grid.M, grid.H + grid.pad_h, grid.W + grid.pad_w)
    t = crop_hwc(t, grid)
    out = permute(t, (0, 3, 1, 2))
    if grid.batch == 1 and not batched:
        return reshape(out, out.shape[1:])
    return out


def cyclic_shift(x: Tensor, shift: int, inverse: bool = False) -> Tensor:
    """Torus roll of the two trailing spatial axes by ``-shift`` (``+shift`` if inverse)."""
    s = shift if inverse else -shift
    return roll(x, (s, s), (-2, -1))


def shift_hwc(x: Tensor, shift: int, inverse: bool = False) -> Tensor:
    s = shift if inverse else -shift
    return roll(x, (s, s), (1, 2))


@lru_cache(maxsize=None)
def rel_pos_index(M: int) -> np.ndarray:
    """``M^2 x M^2`` table of relative-offset buckets in ``[0, (2M-1)^2)``."""
    if M < 1:
        raise ValueError(f"window size must be >= 1, got {M}")
    rows, cols = np.divmod(np.arange(M * M), M)
    dr = rows[:, None] - rows[None, :] + (M - 1)
    dc = cols[:, None] - cols[None, :] + (M - 1)
    idx = dr * (2 * M - 1) + dc
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def shift_mask(Hp: int, Wp: int, M: int, shift: int) -> np.ndarray:
    """Additive attention mask ``N x M^2 x M^2`` for a cyclically shifted grid.

    Tokens that were not spatial neighbours before the roll carry different
    region labels; pairs with different labels get ``MASK_VALUE``.
    """
    N = (Hp // M) * (Wp // M)
    if shift == 0:
        mask = np.zeros((N, M * M, M * M))
    else:
        labels = np.zeros((Hp, Wp), dtype=np.int64)
        spans = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
        label = 0
        for hs in spans:
            for ws in spans:
                labels[hs, ws] = label
                label += 1
        win = labels.reshape(Hp // M, M, Wp // M, M).transpose(0, 2, 1, 3).reshape(N, M * M)
        mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask
