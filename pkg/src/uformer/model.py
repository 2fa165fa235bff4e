"""The U-shaped model: projections, encoder/decoder stages, skips, residual output."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .lewin import LeWinBlockParams, lewin_block, trunc_normal, _param, _zeros
from .tensor import DimensionError, Tensor

SKIP_MODES = ("concat", "cross", "concat_cross")


class ConfigError(ValueError):
    pass


@dataclass
class UformerConfig:
    base_channels: int = 16
    stages: int = 4
    encoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    bottleneck_depth: int | None = None  # None: last encoder depth
    window: int = 8
    head_dim: int | None = None  # None: base_channels
    use_modulator: bool = True
    use_shift: bool = True
    skip_mode: str = "concat"
    in_channels: int = 3
    mlp_ratio: int = 4
    leaky_slope: float = 0.2
    shift_odd_blocks: bool = True
    modulator_pre_shift: bool = False

    def __post_init__(self):
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        if self.bottleneck_depth is None and self.encoder_depths:
            self.bottleneck_depth = self.encoder_depths[-1]
        if self.head_dim is None:
            self.head_dim = self.base_channels

    # -- derived schedule ---------------------------------------------------
    @property
    def decoder_depths(self) -> tuple[int, ...]:
        """Depths in decoder processing order (deepest stage first)."""
        return tuple(reversed(self.encoder_depths))

    @property
    def shift(self) -> int:
        return self.window // 2 if self.use_shift else 0

    def enc_width(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def bottleneck_width(self) -> int:
        return self.base_channels * 2**self.stages

    def dec_width(self, level: int) -> int:
        w = self.enc_width(level)
        return 2 * w if self.skip_mode == "concat" else w

    def up_in(self, level: int) -> int:
        return self.bottleneck_width if level == self.stages - 1 else self.dec_width(level + 1)

    def heads(self, width: int) -> int:
        return width // self.head_dim

    def is_shifted(self, index: int) -> bool:
        if not self.use_shift:
            return False
        return index % 2 == (1 if self.shift_odd_blocks else 0)

    @property
    def min_extent(self) -> int:
        return 2**self.stages

    def validate(self) -> None:
        problems = []
        if self.base_channels < 1:
            problems.append("base_channels must be positive")
        if self.stages < 1:
            problems.append("stages must be positive")
        if len(self.encoder_depths) != self.stages:
            problems.append(f"encoder_depths has {len(self.encoder_depths)} entries for {self.stages} stages")
        if any(d < 1 for d in self.encoder_depths):
            problems.append("encoder depths must be positive")
        if self.bottleneck_depth is None or self.bottleneck_depth < 1:
            problems.append("bottleneck_depth must be positive")
        if self.window < 1:
            problems.append("window must be >= 1")
        if self.skip_mode not in SKIP_MODES:
            problems.append(f"skip_mode must be one of {SKIP_MODES}")
        if self.mlp_ratio < 1:
            problems.append("mlp_ratio must be >= 1")
        if self.in_channels < 1:
            problems.append("in_channels must be positive")
        if not problems and self.head_dim and self.head_dim > 0:
            widths = [self.enc_width(l) for l in range(self.stages)]
            widths += [self.bottleneck_width] + [self.dec_width(l) for l in range(self.stages)]
            for w in widths:
                if w % self.head_dim:
                    problems.append(f"width {w} not divisible by head_dim {self.head_dim}")
                    break
        elif not problems:
            problems.append("head_dim must be positive")
        if problems:
            raise ConfigError("; ".join(problems))


def variant(name: str) -> UformerConfig:
    """The T/S/B presets; bottleneck depth is 2 for all three."""
    presets = {
        "T": dict(base_channels=16, encoder_depths=(2, 2, 2, 2)),
        "S": dict(base_channels=32, encoder_depths=(2, 2, 2, 2)),
        "B": dict(base_channels=32, encoder_depths=(1, 2, 8, 8)),
    }
    key = name.upper().removeprefix("UFORMER-").removeprefix("UFORMER_")
    if key not in presets:
        raise ConfigError(f"unknown variant {name!r}")
    return UformerConfig(stages=4, bottleneck_depth=2, **presets[key])


def tiny_config(**overrides) -> UformerConfig:
    base = dict(base_channels=8, stages=2, encoder_depths=(1, 1), window=4)
    base.update(overrides)
    return UformerConfig(**base)


# -- parameters -------------------------------------------------------------


@dataclass
class Conv:
    w: Tensor
    b: Tensor


@dataclass
class UformerParams:
    config: UformerConfig
    input_proj: Conv
    encoders: list[list[LeWinBlockParams]]
    down: list[Conv]
    bottleneck: list[LeWinBlockParams]
    up: list[Conv]
    decoders: list[list[LeWinBlockParams]]  # indexed by level, like encoders
    output_proj: Conv

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(_walk(self, ""))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        named = self.named_parameters()
        missing = [k for k in named if k not in state]
        extra = [k for k in state if k not in named]
        if missing or (strict and extra):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, t in named.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: expected {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, UformerConfig):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


NO_DECAY_SUFFIXES = (".b", ".bo", ".b1", ".b2", ".dwb", ".gamma", ".beta", ".bias_tables", "modulator.bias")


def decay_exempt(name: str) -> bool:
    """Biases, norm affines, modulators and relative-bias tables skip weight decay."""
    return name.endswith(NO_DECAY_SUFFIXES)


def _conv(rng, cout: int, cin: int, k: int) -> Conv:
    return Conv(_param(trunc_normal(rng, (cout, cin, k, k))), _zeros(cout))


def build(config: UformerConfig, seed: int = 0, zero_output_proj: bool = False) -> UformerParams:
    """Deterministically initialise parameters for ``config``."""
    config.validate()
    rng = np.random.default_rng(seed)
    cfg = config
    M = cfg.window

    def stage(width, depth, modulator, skip=None, enc_dim=None):
        return [
            LeWinBlockParams.init(
                rng,
                width,
                cfg.heads(width),
                M,
                ratio=cfg.mlp_ratio,
                modulator=modulator,
                shifted=cfg.is_shifted(i),
                skip=skip if i == 0 else None,
                enc_dim=enc_dim,
            )
            for i in range(depth)
        ]

    input_proj = _conv(rng, cfg.base_channels, cfg.in_channels, 3)
    encoders, down = [], []
    for l in range(cfg.stages):
        w = cfg.enc_width(l)
        encoders.append(stage(w, cfg.encoder_depths[l], False))
        down.append(_conv(rng, 2 * w, w, 4))
    bottleneck = stage(cfg.bottleneck_width, cfg.bottleneck_depth, False)
    up: list[Conv] = [None] * cfg.stages  # type: ignore[list-item]
    decoders: list[list[LeWinBlockParams]] = [None] * cfg.stages  # type: ignore[list-item]
    for l in reversed(range(cfg.stages)):
        cin, cout = cfg.up_in(l), cfg.enc_width(l)
        up[l] = Conv(_param(trunc_normal(rng, (cin, cout, 2, 2))), _zeros(cout))
        skip = None if cfg.skip_mode == "concat" else cfg.skip_mode
        decoders[l] = stage(cfg.dec_width(l), cfg.encoder_depths[l], cfg.use_modulator, skip, cfg.enc_width(l))
    output_proj = _conv(rng, cfg.in_channels, cfg.dec_width(0), 3)
    if zero_output_proj:
        output_proj.w.data[...] = 0
    return UformerParams(cfg, input_proj, encoders, down, bottleneck, up, decoders, output_proj)


# -- forward ----------------------------------------------------------------


def _chw(t: Tensor) -> Tensor:
    return T.permute(t, (0, 3, 1, 2))


def _hwc(x: Tensor) -> Tensor:
    return T.permute(x, (0, 2, 3, 1))


def downsample(x: Tensor, p: Conv) -> Tensor:
    """4x4 stride-2 convolution: ``c x h x w -> 2c x h/2 x w/2``."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"downsample needs even extents, got {h}x{w}")
    return T.conv2d(x, p.w, p.b, stride=2, padding=1)


def upsample(x: Tensor, p: Conv) -> Tensor:
    """2x2 stride-2 transposed convolution doubling the spatial extents."""
    c = x.shape[-3]
    if c != p.w.shape[0]:
        raise DimensionError(f"upsample weight {p.w.shape} does not match {c} channels")
    return T.conv_transpose2d(x, p.w, p.b, stride=2)


def skip_join(enc: Tensor, dec: Tensor) -> Tensor:
    """Channel concatenation ``[dec, enc]`` of channel-last token maps."""
    if enc.shape[:-1] != dec.shape[:-1]:
        raise DimensionError(f"skip extents differ: {enc.shape} vs {dec.shape}")
    return T.concat([dec, enc], axis=-1)


def forward(img: Tensor, p: UformerParams, trace: list | None = None) -> Tensor:
    """Restore ``img`` (``C x H x W`` or ``B x C x H x W``); returns ``img + residual``.

    Extents are reflect-padded up to a multiple of ``2**stages`` and the
    result cropped back.  ``trace`` collects ``(name, shape)`` per stage.
    """
    cfg = p.config
    x = img if isinstance(img, Tensor) else Tensor(img)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    B, _, H, W = x.shape
    if H < cfg.min_extent or W < cfg.min_extent:
        raise ConfigError(f"input {H}x{W} smaller than the minimum {cfg.min_extent}x{cfg.min_extent}")
    f = cfg.min_extent
    ph, pw = (-H) % f, (-W) % f
    xin = T.pad_reflect(x, {2: (0, ph), 3: (0, pw)})
    note = trace.append if trace is not None else (lambda item: None)

    y = T.leaky_relu(T.conv2d(xin, p.input_proj.w, p.input_proj.b, padding=1), cfg.leaky_slope)
    t = _hwc(y)
    kw = dict(shift=cfg.shift, modulator_pre_shift=cfg.modulator_pre_shift)
    skips = []
    for l in range(cfg.stages):
        for blk in p.encoders[l]:
            t = lewin_block(t, blk, **kw)
        note((f"encoder{l}", (t.shape[0], t.shape[3], t.shape[1], t.shape[2])))
        skips.append(t)
        t = _hwc(downsample(_chw(t), p.down[l]))
    for blk in p.bottleneck:
        t = lewin_block(t, blk, **kw)
    note(("bottleneck", (t.shape[0], t.shape[3], t.shape[1], t.shape[2])))
    for l in reversed(range(cfg.stages)):
        t = _hwc(upsample(_chw(t), p.up[l]))
        enc = skips[l]
        if cfg.skip_mode == "concat":
            t = skip_join(enc, t)
        for i, blk in enumerate(p.decoders[l]):
            t = lewin_block(t, blk, enc=enc if i == 0 else None, **kw)
        note((f"decoder{l}", (t.shape[0], t.shape[3], t.shape[1], t.shape[2])))
    r = T.conv2d(_chw(t), p.output_proj.w, p.output_proj.b, padding=1)
    if ph or pw:
        r = r[:, :, :H, :W]
    out = x + r
    return T.reshape(out, out.shape[1:]) if squeeze else out


@dataclass
class Model:
    """Callable wrapper pairing parameters with :func:`forward`."""

    params: UformerParams

    @property
    def config(self) -> UformerConfig:
        return self.params.config

    def __call__(self, img) -> Tensor:
        return forward(img, self.params)

    def restore(self, img: np.ndarray) -> np.ndarray:
        """No-grad convenience: numpy in, numpy out, in the parameters' dtype."""
        dtype = self.params.input_proj.w.dtype
        with T.no_grad():
            return forward(Tensor(np.asarray(img, dtype=dtype)), self.params).data
