"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every operation the model needs is defined here as a primitive with its own
adjoint.  Tensors produced by an operation remember their parents and a
closure that pushes the output gradient back into them; :meth:`Tensor.backward`
replays those closures in reverse topological order.

Leading batch axes are allowed everywhere: ``conv2d`` accepts ``C x H x W`` or
``B x C x H x W`` and ``matmul`` follows numpy's stacked-matrix rules.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_check_finite(enabled: bool) -> None:
    """Raise on any NaN/Inf produced by an operation (diagnostic mode)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextmanager
def no_grad():
    """Run operations without recording them for backward."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` of every tensor that requires it.

        Gradients accumulate; callers zero them between steps.
        """
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = graph(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- computation record -----------------------------------------------------


@dataclass(frozen=True)
class OpRecord:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]


def graph(root: Tensor) -> list[Tensor]:
    """Topologically ordered tensors reachable from ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def computation_record(root: Tensor) -> list[OpRecord]:
    """The executed primitive operations feeding ``root``, in execution order."""
    return [OpRecord(t.op, t, t._parents) for t in graph(root) if t._backward is not None]


# -- elementwise ------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad**p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    out = (xd * cdf).astype(xd.dtype, copy=False)
    return _make(out, (x,), lambda g: ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),), "gelu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    scale = np.where(xd >= 0, 1.0, slope).astype(xd.dtype)
    return _make(xd * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def activation(x: Tensor, kind: str = "gelu", slope: float = 0.2) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions -------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- layout -----------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"{axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "permute",
    )


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; use :func:`take` for gathers."""
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(np.array(a.data[idx]), (a,), back, "getitem")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the adjoint."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    neg_shifts = tuple(-s for s in shifts)
    return _make(
        np.roll(a.data, shifts, axis=axes),
        (a,),
        lambda g: (np.roll(g, neg_shifts, axis=axes),),
        "roll",
    )


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for reflect padding (edge not repeated), any pad width."""
    pos = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(pos)
    period = 2 * (n - 1)
    pos = np.mod(pos, period)
    return np.where(pos >= n, period - pos, pos)


def pad_reflect(a: Tensor, pads: dict[int, tuple[int, int]]) -> Tensor:
    """Reflect-pad the given axes; ``pads`` maps axis -> (before, after)."""
    out = a
    for axis, (lo, hi) in pads.items():
        if lo or hi:
            out = take(out, reflect_indices(out.shape[axis], lo, hi), axis)
    return out


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis; ``w`` is ``in x out``."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    c = xd.shape[-1]
    # shifting by the first channel makes a constant token centre to exact zeros
    ref = xd[..., :1]
    centred = xd - ref
    centred = centred - centred.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd

    def back(g):
        gx = g * gd
        dx = rstd / c * (c * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), back, "layer_norm")


# -- convolutions -----------------------------------------------------------


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected C x H x W or B x C x H x W, got {x.shape}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"extent {n} with kernel {k}, stride {stride}, padding {padding} gives a non-integral output"
        )
    return span // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``w`` has shape ``Cout x (Cin/groups) x kh x kw``.
    """
    xb, squeeze = _as_batched(x)
    B, cin, H, W = xb.shape
    cout, cpg, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ValueError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cpg != cin // groups:
        raise DimensionError(f"weight {w.shape} does not match input {xb.shape} with groups={groups}")
    ho = conv_output_size(H, kh, stride, padding)
    wo = conv_output_size(W, kw, stride, padding)
    s, p = stride, padding
    xd = xb.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    wd = w.data
    depthwise = groups == cin and cpg == 1 and cout == cin

    def window(arr, i, j):
        return arr[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]

    if depthwise:
        out = np.zeros((B, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += window(xp, i, j) * wd[None, :, 0, i, j, None, None]
    else:
        cols = _im2col(xp, kh, kw, s, ho, wo)  # B, cin, kh, kw, ho, wo
        cols_g = cols.reshape(B, groups, cpg, kh, kw, ho, wo)
        wg = wd.reshape(groups, cout // groups, cpg, kh, kw)
        out = np.einsum("bgcijhw,gocij->bgohw", cols_g, wg, optimize=True).reshape(B, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (window(xp, i, j) * g).sum(axis=(0, 2, 3))
                    window(gxp, i, j)[...] += g * wd[None, :, 0, i, j, None, None]
        else:
            gg = g.reshape(B, groups, cout // groups, ho, wo)
            gw = np.einsum("bgcijhw,bgohw->gocij", cols_g, gg, optimize=True).reshape(wd.shape)
            gcols = np.einsum("gocij,bgohw->bgcijhw", wg, gg, optimize=True).reshape(B, cin, kh, kw, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += gcols[:, :, i, j]
        gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (xb, w) if bias is None else (xb, w, bias)
    out_t = _make(out, parents, back, "conv2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    B, c = xp.shape[:2]
    cols = np.empty((B, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    return cols


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``w`` has shape ``Cin x Cout x kh x kw``; output extent is
    ``(H - 1) * stride + kh - 2 * padding``.
    """
    xb, squeeze = _as_batched(x)
    B, cin, H, W = xb.shape
    if w.shape[0] != cin:
        raise DimensionError(f"conv_transpose2d weight {w.shape} does not match input {xb.shape}")
    _, cout, kh, kw = w.shape
    s, p = stride, padding
    hf, wf = (H - 1) * s + kh, (W - 1) * s + kw
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv_transpose2d output would be empty for input {xb.shape}")
    xd, wd = xb.data, w.data

    def window(arr, i, j):
        return arr[:, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s]

    full = np.zeros((B, cout, hf, wf), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            window(full, i, j)[...] += np.einsum("bchw,co->bohw", xd, wd[:, :, i, j], optimize=True)
    out = full[:, :, p : p + ho, p : p + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gfull = np.zeros((B, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, p : p + ho, p : p + wo] = g
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                gs = window(gfull, i, j)
                gx += np.einsum("bohw,co->bchw", gs, wd[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("bchw,bohw->co", xd, gs, optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (xb, w) if bias is None else (xb, w, bias)
    out_t = _make(out, parents, back, "conv_transpose2d")
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t
