"""LeWin transformer block: windowed attention with relative position bias and
modulator, plus the locally-enhanced feed-forward network.

Blocks run on channel-last token maps ``B x H x W x C``; the spec-shaped
wrappers (:func:`wmsa_forward`, :func:`leff_forward`, :func:`lewin_block_forward`)
accept channel-first ``C x H x W`` maps and convert at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor
from .windowing import (
    make_grid,
    pad_hwc,
    crop_hwc,
    partition_hwc,
    reverse_hwc,
    rel_pos_index,
    shift_hwc,
    shift_mask,
)


# -- parameter containers ---------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype or T.get_default_dtype())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _zeros(shape) -> Tensor:
    return _param(np.zeros(shape, dtype=T.get_default_dtype()))


def _ones(shape) -> Tensor:
    return _param(np.ones(shape, dtype=T.get_default_dtype()))


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, c: int) -> "Norm":
        return cls(_ones(c), _zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass
class WMSAParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    bias_tables: Tensor  # heads x (2M-1)^2
    heads: int
    M: int

    @property
    def dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def init(cls, rng, dim: int, heads: int, M: int, kv_dim: int | None = None) -> "WMSAParams":
        if heads < 1 or dim % heads:
            raise ValueError(f"width {dim} not divisible into {heads} heads")
        kv_dim = kv_dim or dim
        return cls(
            wq=_param(trunc_normal(rng, (dim, dim))),
            wk=_param(trunc_normal(rng, (kv_dim, dim))),
            wv=_param(trunc_normal(rng, (kv_dim, dim))),
            wo=_param(trunc_normal(rng, (dim, dim))),
            bo=_zeros(dim),
            bias_tables=_param(trunc_normal(rng, (heads, (2 * M - 1) ** 2))),
            heads=heads,
            M=M,
        )


@dataclass
class LeFFParams:
    w1: Tensor
    b1: Tensor
    dw: Tensor  # hidden x 1 x 3 x 3, depth-wise
    dwb: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, rng, dim: int, ratio: int = 4) -> "LeFFParams":
        hidden = dim * ratio
        return cls(
            w1=_param(trunc_normal(rng, (dim, hidden))),
            b1=_zeros(hidden),
            dw=_param(trunc_normal(rng, (hidden, 1, 3, 3))),
            dwb=_zeros(hidden),
            w2=_param(trunc_normal(rng, (hidden, dim))),
            b2=_zeros(dim),
        )


@dataclass
class Modulator:
    bias: Tensor  # M x M x C

    @classmethod
    def init(cls, M: int, c: int) -> "Modulator":
        return cls(_zeros((M, M, c)))


@dataclass
class CrossParams:
    """Second attention sub-layer whose keys/values come from the encoder."""

    norm_q: Norm
    norm_kv: Norm
    attn: WMSAParams


@dataclass
class LeWinBlockParams:
    norm1: Norm
    attn: WMSAParams
    norm2: Norm
    leff: LeFFParams
    modulator: Modulator | None = None
    shifted: bool = False
    cross: CrossParams | None = None
    # concat-cross: keys/values come from norm_kv([enc, x]) instead of norm1(x)
    norm_kv: Norm | None = None

    @classmethod
    def init(
        cls,
        rng,
        dim: int,
        heads: int,
        M: int,
        *,
        ratio: int = 4,
        modulator: bool = False,
        shifted: bool = False,
        skip: str | None = None,
        enc_dim: int | None = None,
    ) -> "LeWinBlockParams":
        norm1 = Norm.init(dim)
        kv_dim = dim + enc_dim if skip == "concat_cross" else dim
        attn = WMSAParams.init(rng, dim, heads, M, kv_dim=kv_dim)
        cross = None
        if skip == "cross":
            cross = CrossParams(Norm.init(dim), Norm.init(enc_dim), WMSAParams.init(rng, dim, heads, M, kv_dim=enc_dim))
        norm_kv = Norm.init(kv_dim) if skip == "concat_cross" else None
        return cls(
            norm1=norm1,
            attn=attn,
            norm2=Norm.init(dim),
            leff=LeFFParams.init(rng, dim, ratio),
            modulator=Modulator.init(M, dim) if modulator else None,
            shifted=shifted,
            cross=cross,
            norm_kv=norm_kv,
        )


# -- operations -------------------------------------------------------------


def apply_modulator(windows: Tensor, m: Modulator) -> Tensor:
    """Add the shared ``M x M x C`` bias to every window of ``N x M^2 x C``."""
    M, M2, C = m.bias.shape
    if windows.ndim != 3 or windows.shape[1] != M * M2 or windows.shape[2] != C:
        raise DimensionError(f"modulator {m.bias.shape} does not fit windows {windows.shape}")
    return windows + T.reshape(m.bias, (M * M2, C))


def _heads(x: Tensor, heads: int) -> Tensor:
    n, t, c = x.shape
    return T.permute(T.reshape(x, (n, t, heads, c // heads)), (0, 2, 1, 3))


def relative_bias(p: WMSAParams) -> Tensor:
    M = p.M
    idx = rel_pos_index(M).reshape(-1)
    return T.reshape(T.take(p.bias_tables, idx, axis=1), (p.heads, M * M, M * M))


def effective_shift(Hp: int, Wp: int, M: int, shift: int) -> int:
    # a map that fits in one window gains nothing from rolling
    return 0 if min(Hp, Wp) <= M else shift


def window_attention(
    x: Tensor,
    p: WMSAParams,
    shift: int = 0,
    modulator: Modulator | None = None,
    kv: Tensor | None = None,
    modulator_pre_shift: bool = False,
    return_attention: bool = False,
):
    """Windowed multi-head attention on a channel-last map ``B x H x W x C``.

    ``kv`` (same spatial extents) supplies keys/values for cross attention;
    by default they come from ``x`` itself.
    """
    M = p.M
    B, H, W, C = x.shape
    if C != p.wq.shape[0]:
        raise DimensionError(f"input width {C} does not match projection {p.wq.shape}")
    grid = make_grid(H, W, M, B)
    Hp, Wp = H + grid.pad_h, W + grid.pad_w
    shift = effective_shift(Hp, Wp, M, shift)

    xq = pad_hwc(x, grid)
    xkv = pad_hwc(kv, grid) if kv is not None else None
    if modulator is not None and modulator_pre_shift:
        xq = reverse_hwc(apply_modulator(partition_hwc(xq, M), modulator), M, Hp, Wp)
    if shift:
        xq = shift_hwc(xq, shift)
        if xkv is not None:
            xkv = shift_hwc(xkv, shift)
    wq = partition_hwc(xq, M)
    if modulator is not None and not modulator_pre_shift:
        wq = apply_modulator(wq, modulator)
    wkv = wq if xkv is None else partition_hwc(xkv, M)

    h = p.heads
    q = _heads(T.matmul(wq, p.wq), h)
    k = _heads(T.matmul(wkv, p.wk), h)
    v = _heads(T.matmul(wkv, p.wv), h)
    scale = 1.0 / math.sqrt(p.head_dim)
    logits = T.matmul(q, T.permute(k, (0, 1, 3, 2))) * scale + relative_bias(p)
    if shift:
        mask = shift_mask(Hp, Wp, M, shift).astype(x.dtype)
        nw = mask.shape[0]
        logits = T.reshape(logits, (B, nw, h, M * M, M * M)) + Tensor(mask[None, :, None])
        logits = T.reshape(logits, (B * nw, h, M * M, M * M))
    attn = T.softmax(logits, axis=-1)
    y = T.matmul(attn, v)
    y = T.reshape(T.permute(y, (0, 2, 1, 3)), (y.shape[0], M * M, C))
    y = T.linear(y, p.wo, p.bo)

    out = reverse_hwc(y, M, Hp, Wp)
    if shift:
        out = shift_hwc(out, shift, inverse=True)
    out = crop_hwc(out, grid)
    return (out, attn) if return_attention else out


def leff(x: Tensor, p: LeFFParams) -> Tensor:
    """Token-wise expand, GELU, 3x3 depth-wise conv, GELU, token-wise shrink."""
    h = T.gelu(T.linear(x, p.w1, p.b1))
    h = T.permute(h, (0, 3, 1, 2))
    h = T.conv2d(h, p.dw, p.dwb, stride=1, padding=1, groups=p.hidden)
    h = T.gelu(T.permute(h, (0, 2, 3, 1)))
    return T.linear(h, p.w2, p.b2)


def lewin_block(
    x: Tensor,
    p: LeWinBlockParams,
    shift: int = 0,
    enc: Tensor | None = None,
    modulator_pre_shift: bool = False,
) -> Tensor:
    """One pre-norm block on ``B x H x W x C`` tokens.

    ``x' = attn(LN(x)) + x``, then ``x'' = LeFF(LN(x')) + x'``.  ``enc`` is
    the encoder skip feature used by the cross-attention skip modes.
    """
    s = shift if p.shifted else 0
    if p.norm_kv is not None:
        if enc is None:
            raise ValueError("concat-cross block needs encoder features")
        kv = p.norm_kv(T.concat([enc, x], axis=-1))
        a = window_attention(p.norm1(x), p.attn, s, p.modulator, kv=kv, modulator_pre_shift=modulator_pre_shift)
    else:
        a = window_attention(p.norm1(x), p.attn, s, p.modulator, modulator_pre_shift=modulator_pre_shift)
    x = x + a
    if p.cross is not None:
        if enc is None:
            raise ValueError("cross-attention block needs encoder features")
        c = p.cross
        x = x + window_attention(c.norm_q(x), c.attn, s, kv=c.norm_kv(enc))
    return x + leff(p.norm2(x), p.leff)


# -- channel-first wrappers -------------------------------------------------


def _to_hwc(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.permute(T.reshape(x, (1,) + x.shape), (0, 2, 3, 1)), True
    return T.permute(x, (0, 2, 3, 1)), False


def _to_chw(t: Tensor, squeeze: bool) -> Tensor:
    out = T.permute(t, (0, 3, 1, 2))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def wmsa_forward(
    x: Tensor,
    p: WMSAParams,
    shifted: bool = False,
    modulator: Modulator | None = None,
    shift: int | None = None,
    kv: Tensor | None = None,
) -> Tensor:
    t, sq = _to_hwc(x)
    kvt = _to_hwc(kv)[0] if kv is not None else None
    s = (p.M // 2 if shift is None else shift) if shifted else 0
    return _to_chw(window_attention(t, p, s, modulator, kv=kvt), sq)


def leff_forward(x: Tensor, p: LeFFParams) -> Tensor:
    t, sq = _to_hwc(x)
    return _to_chw(leff(t, p), sq)


def lewin_block_forward(x: Tensor, p: LeWinBlockParams, shift: int | None = None, enc: Tensor | None = None) -> Tensor:
    t, sq = _to_hwc(x)
    et = _to_hwc(enc)[0] if enc is not None else None
    s = p.attn.M // 2 if shift is None else shift
    return _to_chw(lewin_block(t, p, s, enc=et), sq)
