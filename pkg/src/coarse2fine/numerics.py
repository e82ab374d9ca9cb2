"""Dense tensor kernel with a minimal reverse-mode tape and a multiply counter.

Conventions used throughout the package:

* tensors are numpy-backed, row-major, rank 0..4, float32 or float64;
* products and sums inside matmul and reductions are carried in float64
  and cast back to the storage dtype, so f32 runs stay reproducible;
* the multiply counter charges batch*m*k*n for a batched (m,k)@(k,n)
  product and nothing else (softmax, scaling and bias adds are free);
* gradients are accumulated per-tensor on the active tape and read back
  with Tape.grad; tensors never used in the recorded graph get zeros.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

__all__ = [
    "Tensor",
    "Tape",
    "OpCounter",
    "counting",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "power",
    "sqrt",
    "clip",
    "softmax_lastdim",
    "minmax_normalize",
    "layer_norm",
    "l2_norm",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "pad",
    "gather",
    "roll",
    "bilinear_resize",
    "bilinear_upsample",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when ranks, shapes or dtypes violate an op contract."""


class NonFiniteError(ArithmeticError):
    """Raised when a value that must be finite is NaN or infinite."""


def _np_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {d}, expected f32 or f64")
    return d


class Tensor:
    """Rank <= 4 dense real array."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_np_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def check_finite(self, label: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(self.data))[0])
            raise NonFiniteError(f"{label} has a non-finite entry at index {bad}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap scalars and arrays, matching the dtype of `like` when given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# tape

_TAPES: list["Tape"] = []


class Tape:
    """Records op applications so gradients can be replayed in reverse.

    Single-writer: with nested tapes only the innermost records. backward
    walks the recorded nodes exactly once, newest first, and may be called
    once per tape.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def _pull(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        return g

    def _push(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = np.asarray(g, dtype=t.data.dtype)

    def backward(self, output: Tensor) -> None:
        if self._done:
            raise RuntimeError("backward already ran on this tape")
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        self._done = True
        self._grads[id(output)] = np.ones_like(output.data)
        for out, inputs, vjp in reversed(self._nodes):
            g = self._grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is not None:
                    self._push(t, np.asarray(gi, dtype=t.data.dtype))

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward target wrt t, zeros if unused."""
        if not self._done:
            raise RuntimeError("call backward before reading gradients")
        return self._pull(t)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _TAPES:
        _TAPES[-1]._nodes.append((out, tuple(inputs), vjp))
    return out


# ---------------------------------------------------------------------------
# multiply counter

_COUNTERS: list["OpCounter"] = []


class OpCounter:
    """Counts scalar multiplies of forward matrix products, nothing else."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


@contextlib.contextmanager
def counting(counter: OpCounter):
    """Route matmul multiply counts into `counter` (stackable)."""
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.pop()


def _charge(n: int) -> None:
    for c in _COUNTERS:
        c.count += n


# ---------------------------------------------------------------------------
# helpers

def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    """Wrap a binary op's operands; plain scalars adopt the Tensor's dtype."""
    if isinstance(a, Tensor):
        a2, b2 = a, as_tensor(b, like=a)
    elif isinstance(b, Tensor):
        a2, b2 = as_tensor(a, like=b), b
    else:
        a2 = as_tensor(a)
        b2 = as_tensor(b, like=a2)
    _require_same_dtype(a2, b2, op)
    return a2, b2


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (the reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # f32 inputs are upcast so products and sums accumulate in f64
    if a.dtype == np.float32:
        return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)
    return np.matmul(a, b)


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Both operands need rank >= 2; leading axes broadcast. Charges
    prod(batch)*m*k*n multiplies to every active counter.
    """
    a, b = as_tensor(a), as_tensor(b, like=a)
    _require_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = _accum_matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    _charge(batch * m * k * n)
    out = Tensor(out_data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic, exact 0/1 saturation allowed."""
    x = as_tensor(x)
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)

    def vjp(g):
        return (g * out_data * (1.0 - out_data),)

    return _record(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.tanh(x.data)
    out = Tensor(out_data)

    def vjp(g):
        return (g * (1.0 - out_data * out_data),)

    return _record(out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)
    out = Tensor(out_data)

    def vjp(g):
        return (g * out_data,)

    return _record(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))

    def vjp(g):
        return (g / x.data,)

    return _record(out, (x,), vjp)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for a constant float exponent."""
    x = as_tensor(x)
    p = float(p)
    out = Tensor(np.power(x.data, p))

    def vjp(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return _record(out, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    return power(x, 0.5)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    x = as_tensor(x)
    if not lo <= hi:
        raise ValueError(f"clip bounds out of order: {lo} > {hi}")
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)

    def vjp(g):
        return (g * inside,)

    return _record(out, (x,), vjp)


def softmax_lastdim(x: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with optional key validity mask.

    valid is a boolean array broadcastable to x; False entries get weight
    exactly 0 and take no part in the normalization. A fully masked row
    yields all zeros instead of NaN.
    """
    x = as_tensor(x)
    xd = x.data
    if valid is None:
        m = np.max(xd, axis=-1, keepdims=True)
        e = np.exp(xd - m)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), xd.shape)
        neg = np.where(valid, xd, -np.inf)
        m = np.max(neg, axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(valid, np.exp(xd - m), 0.0)
    denom = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    denom = np.where(denom == 0.0, 1.0, denom)
    out_data = (e / denom).astype(xd.dtype)
    out = Tensor(out_data)

    def vjp(g):
        dot = np.sum(g * out_data, axis=-1, keepdims=True, dtype=np.float64)
        return ((g - dot.astype(xd.dtype)) * out_data,)

    return _record(out, (x,), vjp)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Tensor(np.asarray(out_data).astype(x.data.dtype))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _record(out, (x,), vjp)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _argreduce(x: Tensor, axis, keepdims, fn, argfn):
    x = as_tensor(x)
    xd = x.data
    out_data = fn(xd, axis=axis, keepdims=keepdims)
    out = Tensor(np.asarray(out_data, dtype=xd.dtype))
    if axis is None:
        flat_idx = argfn(xd)

        def vjp(g):
            gx = np.zeros_like(xd)
            gx.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            return (gx,)
    else:
        idx = np.expand_dims(argfn(xd, axis=axis), axis)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            gx = np.zeros_like(xd)
            np.put_along_axis(gx, idx, np.asarray(g, dtype=xd.dtype), axis=axis)
            return (gx,)

    return _record(out, (x,), vjp)


def reduce_max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties send the gradient to the first winner."""
    return _argreduce(x, axis, keepdims, np.max, np.argmax)


def reduce_min(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _argreduce(x, axis, keepdims, np.min, np.argmin)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out_data = x.data.reshape(shape)
    if out_data.ndim > 4:
        raise ShapeError(f"reshape to rank {out_data.ndim} exceeds the maximum of 4")
    out = Tensor(out_data)

    def vjp(g):
        return (np.asarray(g).reshape(x.shape),)

    return _record(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), vjp)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    for p in parts[1:]:
        _require_same_dtype(parts[0], p, "concat")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), vjp)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice of `size` elements starting at `start` along axis."""
    x = as_tensor(x)
    axis = int(axis)
    if start < 0 or size < 1 or start + size > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + size}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(x.data[sl]))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _record(out, (x,), vjp)


def pad(x: Tensor, widths) -> Tensor:
    """Zero-pad; widths is a (before, after) pair per axis."""
    x = as_tensor(x)
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise ShapeError(f"pad widths rank {len(widths)} vs tensor rank {x.ndim}")
    out = Tensor(np.pad(x.data, widths))
    sl = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))

    def vjp(g):
        return (np.asarray(g)[sl],)

    return _record(out, (x,), vjp)


def gather(x: Tensor, axis: int, index) -> Tensor:
    """Take rows along `axis` by a 1-D integer index (repeats allowed)."""
    x = as_tensor(x)
    axis = int(axis)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"gather index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ShapeError(f"gather index out of range for axis {axis} of {x.shape}")
    out = Tensor(np.take(x.data, index, axis=axis))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gmoved = np.moveaxis(np.asarray(g), axis, 0)
        gxm = np.moveaxis(gx, axis, 0)
        np.add.at(gxm, index, gmoved)
        return (gx,)

    return _record(out, (x,), vjp)


def roll(x: Tensor, shifts, axes) -> Tensor:
    """Cyclic shift along the given axes."""
    x = as_tensor(x)
    shifts = tuple(int(s) for s in np.atleast_1d(shifts))
    axes = tuple(int(a) for a in np.atleast_1d(axes))
    out = Tensor(np.roll(x.data, shifts, axis=axes))

    def vjp(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# composites

def minmax_normalize(x: Tensor, per_sample: bool = True) -> Tensor:
    """Affine rescale to [0, 1]; a constant input maps to all 0.5.

    per_sample treats axis 0 as the batch and normalizes each row of the
    flattened remainder on its own, so one degenerate sample does not
    disturb the others.
    """
    x = as_tensor(x)
    orig_shape = x.shape
    if per_sample and x.ndim >= 2:
        flat = reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
    else:
        flat = reshape(x, (1, x.size))
    lo = reduce_min(flat, axis=1, keepdims=True)
    hi = reduce_max(flat, axis=1, keepdims=True)
    span = sub(hi, lo)
    flatrow = (span.data <= 0.0)
    # constant rows: force denominator 1 and splice in 0.5, with zero grad
    bump = Tensor(flatrow.astype(x.data.dtype))
    keep = Tensor((~flatrow).astype(x.data.dtype))
    denom = add(span, bump)
    scaled = div(sub(flat, lo), denom)
    out = add(mul(scaled, keep), mul(bump, 0.5))
    return reshape(out, orig_shape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale-shift."""
    x = as_tensor(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = reduce_mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, float(eps)), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt(reduce_sum(mul(x, x), axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------------------
# bilinear resize

def _resize_axis_weights(n_in: int, n_out: int):
    # half-pixel sampling: src = (i + 0.5) * n_in / n_out - 0.5, clamped
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    return i0, i1, w


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a B x C x H x W tensor with half-pixel bilinear sampling.

    Interpolation uses the lerp form a + w * (b - a), so a constant input
    reproduces the constant bit-exactly at any output size.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects B x C x H x W, got {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {out_h} x {out_w}")
    b, c, h, w = x.shape
    y0, y1, wy = _resize_axis_weights(h, out_h)
    x0, x1, wx = _resize_axis_weights(w, out_w)
    wy = wy.reshape(1, 1, out_h, 1).astype(x.data.dtype)
    wx = wx.reshape(1, 1, 1, out_w).astype(x.data.dtype)
    xd = x.data

    top = xd[:, :, y0, :]
    bot = xd[:, :, y1, :]
    rows = top + wy * (bot - top)
    left = rows[:, :, :, x0]
    right = rows[:, :, :, x1]
    out_data = left + wx * (right - left)
    out = Tensor(np.ascontiguousarray(out_data))

    def vjp(g):
        g = np.asarray(g)
        g_left = g * (1.0 - wx)
        g_right = g * wx
        g_rows = np.zeros((b, c, out_h, w), dtype=np.float64)
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x0), g_left)
        np.add.at(g_rows, (slice(None), slice(None), slice(None), x1), g_right)
        g_top = g_rows * (1.0 - wy)
        g_bot = g_rows * wy
        gx = np.zeros((b, c, h, w), dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), g_top)
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), g_bot)
        return (gx.astype(xd.dtype),)

    return _record(out, (x,), vjp)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Integer-factor bilinear upsample of a B x C x H x W tensor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects B x C x H x W, got {x.shape}")
    return bilinear_resize(x, x.shape[2] * factor, x.shape[3] * factor)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f must map x to a scalar Tensor and be safe to re-evaluate; x must be
    f64. Error per coordinate is |analytic - fd| / max(1, |fd|). Raises
    NonFiniteError with the offending coordinate if any evaluation is not
    finite.
    """
    if x.dtype != "f64":
        raise ValueError("grad_check requires an f64 input tensor")
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {y.shape}")
    y.check_finite("grad_check forward value")
    tape.backward(y)
    g = tape.grad(x).reshape(-1)
    if not np.all(np.isfinite(g)):
        bad = int(np.argwhere(~np.isfinite(g))[0])
        raise NonFiniteError(f"non-finite tape gradient at coordinate {bad}")

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite probe at coordinate {i}: f+={fp}, f-={fm}")
        fd = (fp - fm) / (2.0 * eps)
        err = abs(float(g[i]) - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
