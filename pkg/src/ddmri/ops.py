"""Differentiable operations over ``engine.Tensor``.

Every op computes eagerly in the operand dtype and registers a
vector-Jacobian closure with the active tape. Shapes are validated up front;
dtype mixing between float32 and float64 operands is rejected rather than
silently promoted.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .engine import ShapeError, Tensor, record

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class KinkTracker:
    """Records how close the forward pass came to a non-smooth point (relu
    zero, elementwise-max tie). Finite-difference checks use this to verify
    the perturbation neighbourhood lies inside one smooth piece."""

    def __init__(self):
        self.margin = np.inf

    def note(self, values: np.ndarray):
        if values.size:
            self.margin = min(self.margin, float(np.abs(values).min()))


_KINK_TRACKER: KinkTracker | None = None


class track_kink_margin:
    def __enter__(self) -> KinkTracker:
        global _KINK_TRACKER
        self._prev = _KINK_TRACKER
        _KINK_TRACKER = KinkTracker()
        return _KINK_TRACKER

    def __exit__(self, *exc):
        global _KINK_TRACKER
        _KINK_TRACKER = self._prev
        return False


def as_tensor(x, dtype=None, like: Tensor | None = None) -> Tensor:
    """Wrap a constant (no gradient) in the given or inferred dtype."""
    if isinstance(x, Tensor):
        return x
    if dtype is None and like is not None:
        dtype = like.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(name, *tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{name}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_dtype("binary op", a, b)
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    raise TypeError("at least one operand must be a Tensor")


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return record("mul", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics on the leading axes."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        da = _unbroadcast(g @ b_data.swapaxes(-1, -2), a.shape)
        db = _unbroadcast(a_data.swapaxes(-1, -2) @ g, b.shape)
        return da, db

    return record("matmul", out, (a, b), vjp)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the trailing axis: ``x @ w + b``."""
    _check_same_dtype("dense", x, w, b)
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"dense: input trailing dim {x.shape[-1]} != {d_in}")
    if b.shape != (d_out,):
        raise ShapeError(f"dense: bias shape {b.shape} != ({d_out},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = (x2 @ w.data + b.data).reshape(*lead, d_out)

    def vjp(g):
        g2 = g.reshape(-1, d_out)
        dx = (g2 @ w.data.T).reshape(x.shape)
        dw = x2.T @ g2
        db = g2.sum(axis=0)
        return dx, dw, db

    return record("dense", out, (x, w, b), vjp)


# Gather-index cache for conv2d, keyed by (H, W, k, dilation).
_CONV_IDX_CACHE: dict[tuple, np.ndarray] = {}


def _conv_indices(h: int, w: int, k: int, dilation: int) -> tuple[np.ndarray, int, int, int]:
    pad = (k - 1) * dilation // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    key = (h, w, k, dilation)
    idx = _CONV_IDX_CACHE.get(key)
    if idx is None:
        rows = np.arange(h)[:, None, None, None] + dilation * np.arange(k)[None, None, :, None]
        cols = np.arange(w)[None, :, None, None] + dilation * np.arange(k)[None, None, None, :]
        idx = (rows * wp + cols).reshape(h * w, k * k)
        _CONV_IDX_CACHE[key] = idx
    return idx, pad, hp, wp


def conv2d(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """2-D convolution with zero 'same' padding, odd kernels only.

    ``x`` is (Cin, H, W), ``w`` is (Cout, Cin, k, k), ``b`` is (Cout,).
    """
    _check_same_dtype("conv2d", x, w, b)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need (C,H,W) input and (Co,Ci,k,k) weight, got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    if dilation < 1:
        raise ShapeError(f"conv2d: dilation must be >= 1, got {dilation}")

    _, h, wdt = x.shape
    idx, pad, hp, wp = _conv_indices(h, wdt, k, dilation)
    xpad = np.zeros((c_in, hp, wp), dtype=x.dtype)
    xpad[:, pad : pad + h, pad : pad + wdt] = x.data
    # (Cin, H*W, k*k) -> (H*W, Cin*k*k)
    patches = xpad.reshape(c_in, hp * wp)[:, idx].transpose(1, 0, 2).reshape(h * wdt, c_in * k * k)
    wflat = w.data.reshape(c_out, c_in * k * k)
    out = (patches @ wflat.T + b.data).T.reshape(c_out, h, wdt)

    def vjp(g):
        g2 = g.reshape(c_out, h * wdt).T
        db = g2.sum(axis=0)
        dw = (g2.T @ patches).reshape(w.shape)
        dpatches = (g2 @ wflat).reshape(h * wdt, c_in, k * k).transpose(1, 0, 2)
        flat_idx = idx.ravel()
        dxpad = np.empty((c_in, hp * wp), dtype=g.dtype)
        for c in range(c_in):
            dxpad[c] = np.bincount(flat_idx, weights=dpatches[c].ravel(), minlength=hp * wp)
        dx = dxpad.reshape(c_in, hp, wp)[:, pad : pad + h, pad : pad + wdt]
        return dx.astype(g.dtype, copy=False), dw, db

    return record("conv2d", out, (x, w, b), vjp)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    _check_same_dtype("layernorm", x, gain, shift)
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layernorm: gain/shift must be ({c},), got {gain.shape}, {shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gain.data + shift.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dshift = g.sum(axis=lead)
        return dx.astype(g.dtype, copy=False), dgain, dshift

    return record("layernorm", out, (x, gain, shift), vjp)


def relu(x: Tensor) -> Tensor:
    if _KINK_TRACKER is not None:
        _KINK_TRACKER.note(x.data)
    mask = x.data > 0
    out = np.where(mask, x.data, 0)
    return record("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", out, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return ((cdf + x.data * pdf) * g,)

    return record("gelu", out, (x,), vjp)


_POINTWISE = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def pointwise(x: Tensor, kind: str) -> Tensor:
    try:
        return _POINTWISE[kind](x)
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record("softmax", out, (x,), vjp)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    _check_same_dtype("maximum", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes differ {a.shape} vs {b.shape}")
    if _KINK_TRACKER is not None:
        # an exact 0-vs-0 tie is locally constant (both branches clamped
        # upstream), so only gaps at not-all-zero entries threaten smoothness
        live = (a.data != 0) | (b.data != 0)
        _KINK_TRACKER.note((a.data - b.data)[live])
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return g * take_a, g * ~take_a

    return record("maximum", out, (a, b), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes):
    full = list(g.shape)
    for a in sorted(axes):
        full.insert(a, 1)
    return np.broadcast_to(g.reshape(full), shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if keepdims:
            return (np.broadcast_to(g, x.shape).astype(g.dtype, copy=False),)
        return (_expand_reduced(g, x.shape, axes).astype(g.dtype, copy=False),)

    return record("sum", out, (x,), vjp)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gs = g / count
        if keepdims:
            return (np.broadcast_to(gs, x.shape).astype(g.dtype, copy=False),)
        return (_expand_reduced(gs, x.shape, axes).astype(g.dtype, copy=False),)

    return record("mean", out, (x,), vjp)


def sqrt_(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return record("sqrt", out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return record("transpose", out, (x,), lambda g: (g.transpose(inv),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    _check_same_dtype("concat", *parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g_moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(g_moved[offsets[i] : offsets[i + 1]], 0, axis) for i in range(len(parts))
        )

    return record("concat", out, tuple(parts), vjp)


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the last two axes at the high ends."""
    if bottom < 0 or right < 0:
        raise ShapeError("pad2d: negative padding")
    widths = [(0, 0)] * (x.data.ndim - 2) + [(0, bottom), (0, right)]
    out = np.pad(x.data, widths)
    h, w = x.shape[-2], x.shape[-1]

    def vjp(g):
        return (g[..., :h, :w],)

    return record("pad2d", out, (x,), vjp)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h`` x ``w`` region of the last two axes."""
    out = x.data[..., :h, :w]

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., :h, :w] = g
        return (full,)

    return record("crop2d", out, (x,), vjp)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Index rows of a 2-D table; backward scatter-adds."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(idx, dtype=np.intp).ravel()
    out = table.data[idx]

    def vjp(g):
        d = np.zeros_like(table.data)
        np.add.at(d, idx, g)
        return (d,)

    return record("gather_rows", out, (table,), vjp)


def _install_operators():
    Tensor.__add__ = lambda self, other: add(self, other)
    Tensor.__radd__ = lambda self, other: add(other, self)
    Tensor.__sub__ = lambda self, other: sub(self, other)
    Tensor.__rsub__ = lambda self, other: sub(other, self)
    Tensor.__mul__ = lambda self, other: mul(self, other)
    Tensor.__rmul__ = lambda self, other: mul(other, self)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__matmul__ = lambda self, other: matmul(self, other)


_install_operators()
