"""Dense tensors with reverse-mode differentiation.

Everything else in the package composes the primitives defined here. The
engine is deliberately small: numpy holds the values, each op appends a
`DifferentiationRecord` to the output tensor, and `backward` walks the
resulting DAG once. Three pieces of instrumentation matter for the rest of
the lab:

* per-region counters of backward-rule invocations (`backward_counts`),
  used to prove that frozen subgraphs are never backpropagated through;
* a live/peak account of tensors retained for the backward pass
  (`retained_stats`), used to measure what activation checkpointing and
  side placement actually save;
* `checkpointed_sequence`, which drops segment-interior activations during
  forward and recomputes them on demand during backward.

Training runs in float32; gradient checks run the same ops in float64.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError):
    """Operand shapes violate an op contract."""


class NumericError(TensorError):
    """An op produced a non-finite value."""


class ConfigError(TensorError):
    """Invalid static configuration (kernel size, target length, ...)."""


class StateError(TensorError):
    """Illegal engine state transition (e.g. backward on a consumed graph)."""


_FLOAT_DTYPES = (np.float32, np.float64)

# ---------------------------------------------------------------------------
# global engine state
# ---------------------------------------------------------------------------

_grad_enabled = True
_current_region = "default"
_region_counts: dict[str, int] = {}

# live/peak accounting of non-leaf arrays saved for backward
_live_tensors = 0
_peak_tensors = 0
_live_elements = 0
_peak_elements = 0


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def region(name: str):
    """Tag ops created inside the block; backward counts invocations per tag."""
    global _current_region
    prev = _current_region
    _current_region = name
    try:
        yield
    finally:
        _current_region = prev


def backward_counts() -> dict[str, int]:
    """Backward-rule invocations per region tag since the last reset."""
    return dict(_region_counts)


def reset_backward_counts() -> None:
    _region_counts.clear()


class RetainedStats:
    """Snapshot of tensors currently retained for backward."""

    __slots__ = ("live_tensors", "peak_tensors", "live_elements", "peak_elements")

    def __init__(self, live_tensors, peak_tensors, live_elements, peak_elements):
        self.live_tensors = live_tensors
        self.peak_tensors = peak_tensors
        self.live_elements = live_elements
        self.peak_elements = peak_elements

    def __repr__(self):
        return (f"RetainedStats(live_tensors={self.live_tensors}, "
                f"peak_tensors={self.peak_tensors}, "
                f"live_elements={self.live_elements}, "
                f"peak_elements={self.peak_elements})")


def retained_stats() -> RetainedStats:
    return RetainedStats(_live_tensors, _peak_tensors, _live_elements, _peak_elements)


def reset_retained_stats() -> None:
    global _live_tensors, _peak_tensors, _live_elements, _peak_elements
    _live_tensors = _peak_tensors = _live_elements = _peak_elements = 0


def _retain(n_tensors: int, n_elements: int) -> None:
    global _live_tensors, _peak_tensors, _live_elements, _peak_elements
    _live_tensors += n_tensors
    _live_elements += n_elements
    _peak_tensors = max(_peak_tensors, _live_tensors)
    _peak_elements = max(_peak_elements, _live_elements)


def _release(n_tensors: int, n_elements: int) -> None:
    global _live_tensors, _live_elements
    _live_tensors -= n_tensors
    _live_elements -= n_elements


# ---------------------------------------------------------------------------
# tensors and graph records
# ---------------------------------------------------------------------------

class DifferentiationRecord:
    """Per-op node: inputs, saved values, and the backward rule.

    `saved` holds the arrays the rule needs; entries flagged countable
    (non-leaf activations) feed the retained-tensor instrumentation.
    Records are single-use: `backward` releases them as it consumes them.
    """

    __slots__ = ("op", "inputs", "backward_fn", "saved", "region", "released",
                 "_stat_tensors", "_stat_elements")

    def __init__(self, op, inputs, backward_fn, saved):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.saved = tuple(arr for arr, _ in saved)
        self.region = _current_region
        self.released = False
        self._stat_tensors = sum(1 for _, countable in saved if countable)
        self._stat_elements = sum(arr.size for arr, countable in saved if countable)
        _retain(self._stat_tensors, self._stat_elements)

    def release(self):
        if not self.released:
            self.released = True
            self.saved = None
            _release(self._stat_tensors, self._stat_elements)


class Tensor:
    """Dense n-dimensional value with an optional differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "record")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.record = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.record is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """Named weight; when not trainable the optimizer never touches it and
    no gradient storage is allocated for it."""

    __slots__ = ("tensor", "name", "_trainable")

    def __init__(self, value, name: str, trainable: bool = True, dtype=np.float32):
        self.tensor = Tensor(np.array(value, dtype=dtype), requires_grad=trainable)
        self.name = name
        self._trainable = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.tensor.requires_grad = self._trainable
        if not self._trainable:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.data.shape

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape}, trainable={self.trainable})"


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def _result_dtype(*tensors: Tensor):
    return np.float64 if any(t.dtype == np.float64 for t in tensors) else np.float32


def _make(op, out_data, inputs, backward_fn, saved=()):
    """Wrap op output; attach a record when recording applies."""
    _ensure_finite(out_data, op)
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.record = DifferentiationRecord(op, tuple(inputs), backward_fn, saved)
        out.requires_grad = True
    return out


def _save(t: Tensor):
    """Saved-entry for an input tensor: counts toward retained stats only
    when the value is itself graph-produced (leaves persist regardless)."""
    return (t.data, not t.is_leaf)


# ---------------------------------------------------------------------------
# broadcasting rules: equal shapes, or extra/size-1 axes on the left only
# ---------------------------------------------------------------------------

def _leading_one_ok(shape, padded_axis, out_ndim):
    pad = out_ndim - len(shape)
    if padded_axis < pad:
        return True
    own_axis = padded_axis - pad
    return all(e == 1 for e in shape[: own_axis + 1])


def _elementwise_shape(op, sa, sb):
    nd = max(len(sa), len(sb))
    pa = (1,) * (nd - len(sa)) + tuple(sa)
    pb = (1,) * (nd - len(sb)) + tuple(sb)
    out = []
    for i, (x, y) in enumerate(zip(pa, pb)):
        if x == y:
            out.append(x)
        elif x == 1 and _leading_one_ok(sa, i, nd):
            out.append(y)
        elif y == 1 and _leading_one_ok(sb, i, nd):
            out.append(x)
        else:
            raise ShapeError(f"{op}: shapes {tuple(sa)} and {tuple(sb)} do not conform")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` (inverse of leading-axis broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shape("add", a.shape, b.shape)
    out = a.data + b.data

    def bw(saved, g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shape("mul", a.shape, b.shape)
    out = a.data * b.data

    def bw(saved, g):
        da, db = saved
        return (_unbroadcast(g * db, a.shape), _unbroadcast(g * da, b.shape))

    return _make("mul", out, (a, b), bw, saved=(_save(a), _save(b)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bw(saved, g):
        return (g * c,)

    return _make("scale", out, (x,), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def bw(saved, g):
        da, db = saved
        ga = _unbroadcast(g / db, a.shape)
        gb = _unbroadcast(-g * da / (db * db), b.shape)
        return (ga, gb)

    return _make("div", out, (a, b), bw, saved=(_save(a), _save(b)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: stacked dims differ for {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(saved, g):
        da, db = saved
        return (g @ db.swapaxes(-1, -2), da.swapaxes(-1, -2) @ g)

    return _make("matmul", out, (a, b), bw, saved=(_save(a), _save(b)))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_value(x: np.ndarray) -> np.ndarray:
    # exact Gaussian-CDF form, not the tanh approximation
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype)


def gelu(x: Tensor) -> Tensor:
    out = _gelu_value(x.data)

    def bw(saved, g):
        (dx,) = saved
        cdf = 0.5 * (1.0 + erf(dx * _INV_SQRT2))
        pdf = np.exp(-0.5 * dx * dx) * _INV_SQRT2PI
        return ((g * (cdf + dx * pdf)).astype(dx.dtype),)

    return _make("gelu", out, (x,), bw, saved=(_save(x),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gain.data + bias.data

    def bw(saved, g):
        s_xhat, s_inv, s_gain = saved
        gxhat = g * s_gain
        # standard layer-norm gradient over the last axis
        gx = s_inv * (gxhat
                      - gxhat.mean(axis=-1, keepdims=True)
                      - s_xhat * (gxhat * s_xhat).mean(axis=-1, keepdims=True))
        ggain = (g * s_xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return (gx.astype(s_xhat.dtype), ggain.astype(s_xhat.dtype), gbias.astype(s_xhat.dtype))

    # xhat/inv_std are fresh arrays: real retained memory either way
    saved = ((xhat, True), (inv_std, True), (gain.data, False))
    return _make("layer_norm", out, (x, gain, bias), bw, saved=saved)


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(saved, g):
        (y,) = saved
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - dot)).astype(y.dtype),)

    return _make("softmax", out, (x,), bw, saved=((out, True),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bw(saved, g):
        (y,) = saved
        return ((g * y * (1.0 - y)).astype(y.dtype),)

    return _make("sigmoid", out, (x,), bw, saved=((out, True),))


def softplus(x: Tensor) -> Tensor:
    # stable log(1 + e^x)
    out = np.logaddexp(0.0, x.data).astype(x.dtype)

    def bw(saved, g):
        (dx,) = saved
        return ((g / (1.0 + np.exp(-dx))).astype(dx.dtype),)

    return _make("softplus", out, (x,), bw, saved=(_save(x),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(saved, g):
        (y,) = saved
        return ((g * y).astype(y.dtype),)

    return _make("exp", out, (x,), bw, saved=((out, True),))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def bw(saved, g):
        (dx,) = saved
        return ((g / dx).astype(dx.dtype),)

    return _make("log", out, (x,), bw, saved=(_save(x),))


def pow_const(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = x.data ** p

    def bw(saved, g):
        (dx,) = saved
        return ((g * p * dx ** (p - 1.0)).astype(dx.dtype),)

    return _make("pow", out, (x,), bw, saved=(_save(x),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shape("maximum", a.shape, b.shape)
    out = np.maximum(a.data, b.data)

    def bw(saved, g):
        da, db = saved
        take_a = da >= db  # ties route to the first operand
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return (ga.astype(g.dtype), gb.astype(g.dtype))

    return _make("maximum", out, (a, b), bw, saved=(_save(a), _save(b)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_shape("minimum", a.shape, b.shape)
    out = np.minimum(a.data, b.data)

    def bw(saved, g):
        da, db = saved
        take_a = da <= db
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return (ga.astype(g.dtype), gb.astype(g.dtype))

    return _make("minimum", out, (a, b), bw, saved=(_save(a), _save(b)))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e
    in_shape = x.shape

    def bw(saved, g):
        return (g.reshape(in_shape),)

    return _make("reshape", out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(saved, g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} "
                             f"differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(saved, g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _make("concat", out, tuple(tensors), bw)


def slice_(x: Tensor, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    if step < 1:
        raise ConfigError(f"slice: step must be >= 1, got {step}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop, step)
    index = tuple(index)
    out = x.data[index]
    in_shape = x.shape

    def bw(saved, g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _make("slice", out, (x,), bw)


def repeat(x: Tensor, axis: int, times: int) -> Tensor:
    """Repeat each entry along `axis` `times` times (backward sums groups)."""
    times = int(times)
    if times < 1:
        raise ConfigError(f"repeat: times must be >= 1, got {times}")
    out = np.repeat(x.data, times, axis=axis)
    in_shape = x.shape

    def bw(saved, g):
        shp = in_shape[:axis] + (in_shape[axis], times) + in_shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make("repeat", out, (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    in_shape = x.shape

    def bw(saved, g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(g.dtype).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            for a in sorted(a % len(in_shape) for a in axes):
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else (
        np.prod([x.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def depthwise_temporal_conv(x: Tensor, kernel: Tensor, bias: Tensor,
                            stride: int = 1) -> Tensor:
    """Per-channel conv across the second axis of [c, t, h, w].

    Zero padding of (k-1)/2 on both temporal ends; one kernel row per
    channel; spatial dims untouched. `stride` > 1 subsamples the output
    (used by the detector pyramid).
    """
    if x.ndim != 4:
        raise ShapeError(f"depthwise_temporal_conv: expected [c,t,h,w], got {x.shape}")
    c, t, h, w = x.shape
    if kernel.ndim != 2 or kernel.shape[0] != c:
        raise ShapeError(f"depthwise_temporal_conv: kernel {kernel.shape} does not "
                         f"match {c} channels")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise_temporal_conv: kernel size must be odd, got {k}")
    if bias.shape != (c,):
        raise ShapeError(f"depthwise_temporal_conv: bias {bias.shape} does not "
                         f"match {c} channels")
    if stride < 1:
        raise ConfigError(f"depthwise_temporal_conv: stride must be >= 1, got {stride}")
    pad = (k - 1) // 2
    xp = np.zeros((c, t + 2 * pad, h, w), dtype=x.dtype)
    xp[:, pad:pad + t] = x.data
    t_out = (t + stride - 1) // stride
    out = np.empty((c, t_out, h, w), dtype=x.dtype)
    kd = kernel.data
    out[:] = bias.data[:, None, None, None]
    for j in range(k):
        out += kd[:, j, None, None, None] * xp[:, j:j + t:stride]

    def bw(saved, g):
        s_x, s_k = saved
        s_xp = np.zeros((c, t + 2 * pad, h, w), dtype=s_x.dtype)
        s_xp[:, pad:pad + t] = s_x                 # re-pad, don't retain
        gxp = np.zeros_like(s_xp)
        gk = np.zeros_like(s_k)
        for j in range(k):
            gxp[:, j:j + t:stride] += s_k[:, j, None, None, None] * g
            gk[:, j] = (g * s_xp[:, j:j + t:stride]).sum(axis=(1, 2, 3))
        gb = g.sum(axis=(1, 2, 3))
        return (gxp[:, pad:pad + t], gk, gb.astype(g.dtype))

    saved = (_save(x), _save(kernel))
    return _make("depthwise_temporal_conv", out, (x, kernel, bias), bw, saved=saved)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing h, w axes: [d, t, h, w] -> [d, t]."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_avg_pool: expected [d,t,h,w], got {x.shape}")
    d, t, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(saved, g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (d, t, h, w)).copy(),)

    return _make("spatial_avg_pool", out, (x,), bw)


def _resize_matrix(t: int, target_len: int, dtype) -> np.ndarray:
    """Row-stochastic [target_len, t] matrix for endpoint-aligned linear
    interpolation; target_len == 1 averages."""
    m = np.zeros((target_len, t), dtype=dtype)
    if target_len == 1:
        m[0, :] = 1.0 / t
        return m
    if t == 1:
        m[:, 0] = 1.0
        return m
    for i in range(target_len):
        pos = i * (t - 1) / (target_len - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, t - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        if hi != lo:
            m[i, hi] += frac
    return m


def temporal_resize(x: Tensor, target_len: int) -> Tensor:
    """Linear interpolation of [d, t] to [d, target_len], endpoints aligned."""
    if x.ndim != 2:
        raise ShapeError(f"temporal_resize: expected [d,t], got {x.shape}")
    target_len = int(target_len)
    if target_len < 1:
        raise ConfigError(f"temporal_resize: target_len must be >= 1, got {target_len}")
    t = x.shape[1]
    if target_len == t:
        m = None
        out = x.data.copy()
    else:
        m = _resize_matrix(t, target_len, x.dtype)
        out = x.data @ m.T

    def bw(saved, g):
        if m is None:
            return (g,)
        return (g @ m,)

    return _make("temporal_resize", out, (x,), bw)


_PRIMITIVES = {
    "add": add,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice": slice_,
}


def primitive_forward(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named primitives by name."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ConfigError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over tensors that carry records, iteratively (graphs can be
    thousands of nodes deep)."""
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
        rec = node.record
        if rec is None:
            continue
        if rec.released:
            raise StateError("backward was already invoked on this graph; "
                             "rebuild the graph before differentiating again")
        stack.append((node, True))
        for parent in rec.inputs:
            if parent.record is not None and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray) -> None:
    """Reverse sweep from `root`; accumulates into leaf .grad, counts
    backward-rule invocations per region, releases records as it goes."""
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        rec = node.record
        input_grads = rec.backward_fn(rec.saved, g)
        _region_counts[rec.region] = _region_counts.get(rec.region, 0) + 1
        rec.release()
        for inp, ig in zip(rec.inputs, input_grads):
            if ig is None:
                continue
            if inp.record is not None:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
            elif inp.requires_grad:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


def backward(loss: Tensor) -> None:
    """Populate gradients of every trainable leaf reachable from `loss`."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.record is None:
        return
    seed = np.ones(loss.shape, dtype=loss.dtype)
    _run_backward(loss, seed)


# ---------------------------------------------------------------------------
# activation checkpointing
# ---------------------------------------------------------------------------

def checkpointed_sequence(blocks, x: Tensor, num_segments: int | None = None) -> Tensor:
    """Compose `blocks` over x, retaining only segment-boundary activations.

    Forward output is bit-identical to plain composition; segment interiors
    are recomputed inside the backward rule. Default segmentation uses
    ceil(sqrt(N)) blocks per segment.
    """
    blocks = list(blocks)
    n = len(blocks)
    if n == 0:
        return x
    if not _grad_enabled:
        for b in blocks:
            x = b(x)
        return x
    if num_segments is None:
        seg_len = math.ceil(math.sqrt(n))
    else:
        if num_segments < 1:
            raise ConfigError(f"checkpointed_sequence: num_segments must be >= 1, "
                              f"got {num_segments}")
        seg_len = math.ceil(n / num_segments)
    segments = [blocks[i:i + seg_len] for i in range(0, n, seg_len)]

    for seg in segments:
        x = _checkpoint_segment(seg, x)
    return x


def _checkpoint_segment(seg_blocks, x: Tensor) -> Tensor:
    saved_in = x.data.copy()
    fwd_region = _current_region
    with no_grad():
        y = Tensor(saved_in)
        for b in seg_blocks:
            y = b(y)

    def bw(saved, g):
        (inp_data,) = saved
        leaf = Tensor(inp_data, requires_grad=True)
        with region(fwd_region):
            out = leaf
            for b in seg_blocks:
                out = b(out)
        if out.record is None:
            return (None,)
        _run_backward(out, g)
        return (leaf.grad,)

    out = Tensor(y.data)
    out.record = DifferentiationRecord(
        "checkpoint", (x,), bw, saved=((saved_in, not x.is_leaf),))
    out.requires_grad = True
    return out


# ---------------------------------------------------------------------------
# serialization: "TLAB1" magic, uint32 rank, uint32 extents, f32 LE row-major
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"TLAB1"


def write_tensor(fp, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    fp.write(BLOB_MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fp) -> Tensor:
    magic = fp.read(5)
    if magic != BLOB_MAGIC:
        raise ConfigError(f"bad tensor blob magic {magic!r}")
    header = fp.read(4)
    if len(header) != 4:
        raise ConfigError("tensor blob truncated in header")
    (rank,) = struct.unpack("<I", header)
    dims = fp.read(4 * rank)
    if len(dims) != 4 * rank:
        raise ConfigError("tensor blob truncated in shape")
    shape = struct.unpack(f"<{rank}I", dims) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = fp.read(4 * count)
    if len(payload) != 4 * count:
        raise ConfigError(f"tensor blob truncated: expected {4 * count} "
                          f"payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Tensor(data.astype(np.float32))


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fp:
        return read_tensor(fp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking (double precision)
# ---------------------------------------------------------------------------

def gradcheck(fn, inputs, eps: float = 1e-4, rtol: float = 1e-4,
              atol: float = 1e-6, coords: int | None = None,
              rng: np.random.Generator | None = None):
    """Compare backward() grads of scalar fn(*inputs) with central differences.

    Inputs must be float64 leaf tensors with requires_grad=True. `coords`
    samples that many coordinates per input instead of sweeping all of them.
    Returns the worst relative error observed; raises AssertionError when a
    coordinate disagrees beyond rtol/atol.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ConfigError("gradcheck requires float64 inputs")
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idxs = range(flat.size)
        if coords is not None and coords < flat.size:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel = err / denom if denom > atol else 0.0
            worst = max(worst, rel)
            if err > atol and rel > rtol:
                raise AssertionError(
                    f"gradient mismatch at coord {i}: analytic={a!r} "
                    f"numeric={numeric!r} rel={rel:.3e}")
    return worst
