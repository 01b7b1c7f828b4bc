"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every operation below works on whole arrays and registers one record on the
active :class:`Tape` (if any input requires a gradient).  Each record keeps
a hand-written adjoint that maps the output gradient to input gradients.

    with Tape() as tape:
        y = conv2d(x, w, b)
        loss = mean(y)
    gw, gb = tape.gradient(loss, [w, b])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import ConfigurationError, DimensionError, NonFiniteError

_state = {"dtype": np.dtype(np.float32), "debug": False}
_tapes: list["Tape"] = []

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dt}; use float32 or float64")
    _state["dtype"] = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool) -> None:
    """Turn on the finiteness check applied to every op output."""
    _state["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _state["dtype"])
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor(self.data, False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of executed ops, replayed in reverse by :meth:`gradient`."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.records.append(_Record(out, tuple(inputs), backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. ``sources``.

        ``seed`` is the upstream gradient for ``target`` (ones by default).
        Sources that never influenced ``target`` get exact zeros.
        """
        if seed is None:
            seed = np.ones_like(target.data)
        grads = {id(target): np.asarray(seed, dtype=target.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.dtype).reshape(s.shape))
        return out


def result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output and register its adjoint on the active tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced (shape {data.shape})")
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].record(out, inputs, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    if kh == 1 and kw == 1:
        return x.reshape(n, c, h * w)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * kh * kw, h * w)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = shape
    if kh == 1 and kw == 1:
        return cols.reshape(shape)
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, c, kh, kw, h, w)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])


def _check_kernel(kh: int, kw: int) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd for same padding, got {kh}x{kw}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding."""
    _check_4d(x, "conv2d input")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [Cout, Cin, kh, kw], got {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {cin}")
    _check_kernel(kh, kw)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    cols = _im2col(x.data, kh, kw)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, h, w)

    def backward(g):
        g2 = g.reshape(n, cout, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(np.matmul(w2.T, g2), x.shape, kh, kw)
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return result(out, inputs, backward)


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depth-wise convolution: one [kh, kw] filter per channel, same padding."""
    _check_4d(x, "dwconv2d input")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise DimensionError(f"dwconv2d weight must be [{c}, 1, kh, kw], got {weight.shape}")
    kh, kw = weight.shape[2:]
    _check_kernel(kh, kw)
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"dwconv2d bias must have shape ({c},), got {bias.shape}")

    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    dt = np.result_type(x.data, weight.data)
    xp = xp.astype(dt, copy=False)
    wk = np.ascontiguousarray(weight.data[:, 0], dtype=dt)
    out = np.zeros((n, c, h, w), dtype=dt)
    _kernels.dw_forward(xp, wk, out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        g = np.ascontiguousarray(g, dtype=dt)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _kernels.dw_grad_input(g, wk, gxp)
            gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])
        if weight.requires_grad:
            gw = np.empty((c, kh, kw), dtype=dt)
            _kernels.dw_grad_weight(g, xp, gw)
            gw = gw[:, None]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return result(out, inputs, backward)


# ---------------------------------------------------------------------------
# normalisation and activations
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over channels independently at each (n, h, w) site."""
    _check_4d(x, "layer_norm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm affine parameters must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gm = gamma.data[None, :, None, None]
    out = xhat * gm + beta.data[None, :, None, None]

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxh = g * gm
            gx = rstd * (gxh - gxh.mean(axis=1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return result(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return result(out.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# elementwise algebra
# ---------------------------------------------------------------------------

def _operand_shape(a: Tensor, b: Tensor, op: str) -> None:
    """Identical shapes, or b a per-channel vector ((C,) or (N, C, 1, 1))."""
    if a.shape == b.shape:
        return
    if a.ndim == 4 and (b.shape == (a.shape[1],) or b.shape == (a.shape[0], a.shape[1], 1, 1)):
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _expand(a_shape: tuple, b: np.ndarray) -> np.ndarray:
    if b.ndim == 1:
        return b[None, :, None, None]
    return b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1:
        return g.sum(axis=(0, 2, 3))
    return g.sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _operand_shape(a, b, "add")
    out = a.data + _expand(a.shape, b.data)

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (the 'star' gate); b may be a per-channel vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    _operand_shape(a, b, "mul")
    bd = _expand(a.shape, b.data)
    out = a.data * bd

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return result(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * np.asarray(s, dtype=x.dtype)

    def backward(g):
        return (g * s,)

    return result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool input")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return result(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    """Mean of all elements as a 0-d tensor."""
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / x.size, dtype=x.dtype),)

    return result(out, (x,), backward)


def total(x: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Sum of all elements (optionally weighted by a constant array)."""
    if weights is None:
        out = np.asarray(x.data.sum(), dtype=x.dtype)
    else:
        weights = np.asarray(weights, dtype=x.dtype)
        out = np.asarray((x.data * weights).sum(), dtype=x.dtype)

    def backward(g):
        if weights is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        return (g * weights,)

    return result(out, (x,), backward)


# ---------------------------------------------------------------------------
# rearrangements
# ---------------------------------------------------------------------------

def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """(N, C*s*s, H, W) -> (N, C, H*s, W*s)."""
    _check_4d(x, "pixel_shuffle input")
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise ConfigurationError(f"pixel_shuffle: {cs} channels not divisible by {s}^2")
    c = cs // (s * s)
    out = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)

    def backward(g):
        return (g.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return result(np.ascontiguousarray(out), (x,), backward)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _check_4d(x, "pixel_unshuffle input")
    n, c, hs, ws = x.shape
    if s < 1 or hs % s or ws % s:
        raise ConfigurationError(f"pixel_unshuffle: spatial dims {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    out = x.data.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)

    def backward(g):
        return (g.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return result(np.ascontiguousarray(out), (x,), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(x, "channel_slice input")
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {x.shape[1]} channels")
    out = x.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return result(out, (x,), backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(channel_slice(x, start, start + s))
        start += s
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs:
        _check_4d(t, "concat input")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree outside channels")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return result(out, tuple(xs), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return result(out, (x,), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.array(x.data.transpose(axes), order="C")

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return result(out, (x,), backward)


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    out = np.roll(x.data, shifts, axes)

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axes),)

    return result(out, (x,), backward)


def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the bottom and right edges."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)))

    def backward(g):
        return (np.ascontiguousarray(g[:, :, :h, :w]),)

    return result(out, (x,), backward)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w block."""
    if x.shape[2:] == (h, w):
        return x
    out = np.array(x.data[:, :, :h, :w], order="C")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :h, :w] = g
        return (gx,)

    return result(out, (x,), backward)
