"""Finite-difference verification of every adjoint, at float64.

Each check builds a random scalar ``sum(f(inputs) * R)`` with a fixed random
projection ``R`` and compares the analytic gradient of every input with
central differences.  The error reported is the norm-wise relative error
``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    h: float = STEP,
    coords: int | None = None,
) -> float:
    """Max relative error over the gradients of all ``inputs``.

    ``coords`` limits the finite-difference probe to that many random
    coordinates per input (all of them when ``None``).
    """
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        out = fn(*leaves)
        proj = rng.standard_normal(out.shape)
        (out * Tensor(proj)).sum().backward()

        def objective() -> float:
            with T.no_grad():
                return float(np.sum(fn(*leaves).data * proj))

        worst = 0.0
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            if coords is None or coords >= flat.size:
                picks = np.arange(flat.size)
            else:
                picks = rng.choice(flat.size, size=coords, replace=False)
            numeric = np.empty(len(picks))
            for n, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + h
                up = objective()
                flat[i] = orig - h
                down = objective()
                flat[i] = orig
                numeric[n] = (up - down) / (2 * h)
            worst = max(worst, rel_error(analytic.reshape(-1)[picks], numeric))
    return worst


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _primitives(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    from .lewin import LeFFParams, LeWinBlockParams, Modulator, WMSAParams, leff, lewin_block, window_attention
    from .train import charbonnier_loss

    r = rng.standard_normal

    def attn_case():
        with T.default_dtype(np.float64):
            p = WMSAParams.init(rng, 8, 2, 4)
        for t in (p.wq, p.wk, p.wv, p.wo, p.bias_tables):
            t.data = t.data * 20  # move away from the near-linear regime
        mod = Modulator(Tensor(r((4, 4, 8)) * 0.1))

        def f(x, wq, bt, mb):
            p.wq, p.bias_tables, mod.bias = wq, bt, mb
            return window_attention(x, p, shift=2, modulator=mod)

        return f, [r((1, 8, 10, 8)), p.wq.data.copy(), p.bias_tables.data.copy(), mod.bias.data.copy()]

    def leff_case():
        with T.default_dtype(np.float64):
            p = LeFFParams.init(rng, 4, 2)
        p.w1.data *= 20
        p.dw.data *= 20
        p.w2.data *= 20

        def f(x, w1, dw):
            p.w1, p.dw = w1, dw
            return leff(x, p)

        return f, [r((1, 5, 6, 4)), p.w1.data.copy(), p.dw.data.copy()]

    def block_case():
        with T.default_dtype(np.float64):
            p = LeWinBlockParams.init(rng, 8, 2, 4, ratio=2, modulator=True, shifted=True)
        for t in (p.attn.wq, p.attn.wk, p.attn.wv, p.attn.wo, p.leff.w1, p.leff.w2):
            t.data = t.data * 20

        def f(x, g1, wv):
            p.norm1.gamma, p.attn.wv = g1, wv
            return lewin_block(x, p, shift=2)

        return f, [r((1, 8, 8, 8)), p.norm1.gamma.data + r(8) * 0.1, p.attn.wv.data.copy()]

    return {
        "matmul": (T.matmul, [r((3, 4)), r((4, 5))]),
        "matmul_batched": (T.matmul, [r((2, 3, 4)), r((4, 2))]),
        "add_broadcast": (T.add, [r((2, 3, 4)), r(4)]),
        "mul_broadcast": (T.mul, [r((2, 3, 4)), r((3, 1))]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, padding=1), [r((2, 5, 5)), r((3, 2, 3, 3)), r(3)]),
        "conv2d_strided": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [r((2, 3, 6, 6)), r((4, 3, 4, 4)), r(4)]),
        "conv2d_grouped": (lambda x, w: T.conv2d(x, w, stride=1, padding=1, groups=2), [r((4, 5, 5)), r((6, 2, 3, 3))]),
        "conv2d_depthwise": (lambda x, w, b: T.conv2d(x, w, b, padding=1, groups=3), [r((3, 5, 4)), r((3, 1, 3, 3)), r(3)]),
        "conv_transpose2d": (lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2), [r((3, 4, 4)), r((3, 2, 2, 2)), r(2)]),
        "softmax": (lambda x: T.softmax(x, axis=-1), [r((3, 5))]),
        "layer_norm": (T.layer_norm, [r((4, 6)), r(6), r(6)]),
        "gelu": (T.gelu, [r((3, 4)) * 2]),
        "leaky_relu": (lambda x: T.leaky_relu(x, 0.2), [r((3, 4))]),
        "reshape_permute": (lambda x: T.permute(T.reshape(x, (3, 2, 4)), (2, 0, 1)), [r((6, 4))]),
        "take": (lambda x: T.take(x, np.array([[0, 2], [2, 1]]), axis=1), [r((2, 3))]),
        "pad_reflect": (lambda x: T.pad_reflect(x, {0: (0, 3), 1: (2, 5)}), [r((3, 4))]),
        "roll": (lambda x: T.roll(x, (1, -2), (0, 1)), [r((3, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        "getitem": (lambda x: x[1:, :3], [r((3, 4))]),
        "sqrt": (lambda x: T.sqrt(x), [np.abs(r((3, 3))) + 0.5]),
        "power": (lambda x: T.power(x, -1.0), [np.abs(r((3, 3))) + 0.5]),
        "sum_mean": (lambda x: T.tsum(x, axis=1) + T.tmean(x, axis=1), [r((3, 4))]),
        "charbonnier": (lambda a, b: charbonnier_loss(a, b, 0.3), [r((2, 3, 3)), r((2, 3, 3))]),
        "window_attention": attn_case(),
        "leff": leff_case(),
        "lewin_block": block_case(),
    }


def _model_case(seed: int, config=None):
    from .model import build, forward, tiny_config
    from .train import charbonnier_loss

    config = config or tiny_config()
    with T.default_dtype(np.float64):
        params = build(config, seed)
    rng = np.random.default_rng(seed + 1)
    # trained-looking weights: push past the tiny-init regime so every path matters
    for name, t in params.named_parameters().items():
        if name.endswith(("modulator.bias", ".b", ".bo", ".b1", ".b2", ".dwb")):
            t.data = rng.standard_normal(t.shape) * 0.05
        elif not name.endswith((".gamma", ".beta")):
            t.data = t.data * 10
    side = config.min_extent * 2
    img = rng.uniform(0, 1, (config.in_channels, side, side))
    target = rng.uniform(0, 1, (config.in_channels, side, side))
    named = params.named_parameters()
    names = list(named)

    def f(x, *ws):
        for n, w in zip(names, ws):
            setattr_path(params, n, w)
        return charbonnier_loss(forward(x, params), target, 0.05)

    return f, [img] + [named[n].data.copy() for n in names]


def setattr_path(obj, dotted: str, value) -> None:
    parts = dotted.split(".")
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], value)


def run_suite(seed: int = 0, include_model: bool = True, model_coords: int = 2, model_config=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in _primitives(rng).items():
        results.append(CheckResult(name, check(fn, inputs, seed), PRIMITIVE_TOL))
    if include_model:
        fn, inputs = _model_case(seed, model_config)
        results.append(CheckResult("uformer_tiny", check(fn, inputs, seed, coords=model_coords), MODEL_TOL))
    return results
