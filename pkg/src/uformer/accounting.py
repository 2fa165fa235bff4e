"""Closed-form parameter and multiply-accumulate counts for a :class:`UformerConfig`.

Conventions: one multiply-accumulate is one MAC; softmax, activations, norm
arithmetic and residual additions are not counted.  Attention MACs for a
``C``-wide map of ``HW`` tokens in ``M x M`` windows are
``4 * HW * C^2`` (Q, K, V, output projections) plus ``2 * HW * M^2 * C``
(``QK^T`` and ``AV``).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .model import UformerConfig

ASSUMPTIONS = (
    "1 MAC = one multiply-accumulate; softmax/activation/norm/residual arithmetic excluded",
    "Q/K/V projections unbiased, output projection biased",
    "relative-position bias: one (2M-1)^2 table per head",
    "LeFF hidden width = mlp_ratio * C, depth-wise 3x3 conv with bias",
    "concat skip: decoder stage runs at twice the encoder width; upsampler maps back down",
    "modulators (M*M*C each) on every decoder block, none in the bottleneck",
    "window attention counted on extents padded up to a multiple of M",
    "variants T/S/B use bottleneck depth 2",
)


@dataclass
class Row:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[Row] = field(default_factory=list)
    resolution: tuple[int, int] | None = None

    def add(self, name: str, params: int, macs: int = 0) -> None:
        self.rows.append(Row(name, int(params), int(macs)))

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def stage_totals(self) -> dict[str, tuple[int, int]]:
        """Rows grouped by their top-level stage prefix (``encoder0``, ``up1``...)."""
        out: dict[str, tuple[int, int]] = {}
        for r in self.rows:
            key = r.name.split(".")[0]
            p, m = out.get(key, (0, 0))
            out[key] = (p + r.params, m + r.macs)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs])
        w.writerow(["total", self.params, self.macs])
        return buf.getvalue()

    def table(self, per_stage: bool = True) -> str:
        items = self.stage_totals().items() if per_stage else ((r.name, (r.params, r.macs)) for r in self.rows)
        items = list(items)
        width = max([len(k) for k, _ in items] + [5])
        lines = [f"{'name':<{width}}  {'params':>12}  {'MACs':>16}"]
        for k, (p, m) in items:
            lines.append(f"{k:<{width}}  {p:>12,}  {m:>16,}")
        lines.append(f"{'total':<{width}}  {self.params:>12,}  {self.macs:>16,}")
        if self.resolution:
            lines.append(f"(MACs at {self.resolution[0]}x{self.resolution[1]}: {self.macs / 1e9:.2f} G; params {self.params / 1e6:.2f} M)")
        return "\n".join(lines)


def linear_params(cin: int, cout: int, bias: bool = True) -> int:
    return cin * cout + (cout if bias else 0)


def conv_params(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return cout * (cin // groups) * k * k + (cout if bias else 0)


def conv_macs(cin: int, cout: int, k: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return cout * (cin // groups) * k * k * h_out * w_out


def wmsa_macs(h: int, w: int, c: int, M: int, kv_c: int | None = None) -> int:
    """Projection plus attention MACs for one windowed attention layer."""
    kv_c = kv_c or c
    hp, wp = h + (-h) % M, w + (-w) % M
    tokens = hp * wp
    proj = tokens * c * c * 2 + tokens * kv_c * c * 2  # Q, output; K, V
    return proj + 2 * tokens * M * M * c


def global_attention_macs(h: int, w: int, c: int) -> int:
    tokens = h * w
    return 4 * tokens * c * c + 2 * tokens * tokens * c


def _block(report: CostReport, name: str, cfg: UformerConfig, c: int, h: int, w: int, *, modulator: bool, first_skip: str | None, enc_c: int):
    M = cfg.window
    heads = cfg.heads(c)
    table = heads * (2 * M - 1) ** 2
    hidden = cfg.mlp_ratio * c
    kv_c = c + enc_c if first_skip == "concat_cross" else c
    report.add(f"{name}.norm1", 2 * c)
    attn_p = linear_params(c, c, False) + 2 * linear_params(kv_c, c, False) + linear_params(c, c) + table
    report.add(f"{name}.attn", attn_p, wmsa_macs(h, w, c, M, kv_c))
    if first_skip == "concat_cross":
        report.add(f"{name}.norm_kv", 2 * kv_c)
    if modulator:
        report.add(f"{name}.modulator", M * M * c)
    if first_skip == "cross":
        report.add(f"{name}.cross.norms", 2 * c + 2 * enc_c)
        cross_p = linear_params(c, c, False) + 2 * linear_params(enc_c, c, False) + linear_params(c, c) + table
        report.add(f"{name}.cross.attn", cross_p, wmsa_macs(h, w, c, M, enc_c))
    report.add(f"{name}.norm2", 2 * c)
    tokens = h * w
    leff_p = linear_params(c, hidden) + conv_params(hidden, hidden, 3, groups=hidden) + linear_params(hidden, c)
    leff_m = tokens * c * hidden * 2 + conv_macs(hidden, hidden, 3, h, w, groups=hidden)
    report.add(f"{name}.leff", leff_p, leff_m)


def _report(cfg: UformerConfig, H: int, W: int) -> CostReport:
    cfg.validate()
    f = cfg.min_extent
    H, W = H + (-H) % f, W + (-W) % f
    rep = CostReport(resolution=(H, W))
    C = cfg.base_channels
    rep.add("input_proj", conv_params(cfg.in_channels, C, 3), conv_macs(cfg.in_channels, C, 3, H, W))
    for l in range(cfg.stages):
        c, h, w = cfg.enc_width(l), H >> l, W >> l
        for i in range(cfg.encoder_depths[l]):
            _block(rep, f"encoder{l}.{i}", cfg, c, h, w, modulator=False, first_skip=None, enc_c=0)
        rep.add(f"down{l}", conv_params(c, 2 * c, 4), conv_macs(c, 2 * c, 4, h // 2, w // 2))
    K = cfg.stages
    for i in range(cfg.bottleneck_depth):
        _block(rep, f"bottleneck.{i}", cfg, cfg.bottleneck_width, H >> K, W >> K, modulator=False, first_skip=None, enc_c=0)
    skip = None if cfg.skip_mode == "concat" else cfg.skip_mode
    for l in reversed(range(cfg.stages)):
        h, w = H >> l, W >> l
        cin, cout = cfg.up_in(l), cfg.enc_width(l)
        # transposed conv: every input pixel scatters a k x k patch
        rep.add(f"up{l}", cin * cout * 4 + cout, cin * cout * 4 * (h // 2) * (w // 2))
        c = cfg.dec_width(l)
        for i in range(cfg.encoder_depths[l]):
            _block(
                rep,
                f"decoder{l}.{i}",
                cfg,
                c,
                h,
                w,
                modulator=cfg.use_modulator,
                first_skip=skip if i == 0 else None,
                enc_c=cfg.enc_width(l),
            )
    rep.add("output_proj", conv_params(cfg.dec_width(0), cfg.in_channels, 3), conv_macs(cfg.dec_width(0), cfg.in_channels, 3, H, W))
    return rep


def count_params(cfg: UformerConfig) -> CostReport:
    """Per-layer learnable-scalar counts (MAC column at 256x256)."""
    return _report(cfg, 256, 256)


def count_macs(cfg: UformerConfig, H: int = 256, W: int = 256) -> CostReport:
    return _report(cfg, H, W)


def attention_term(h: int, w: int, c: int, M: int) -> int:
    """The window-attention part ``2 * HW * M^2 * C`` on its own (no projections)."""
    return 2 * h * w * M * M * c
