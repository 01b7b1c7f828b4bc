"""Neighbourhood attention kernels: regional (dense), sparse-global (dilated),
their multi-range aggregations, and a window-attention baseline.

All kernels take Q/K/V as (N, heads*head_dim, H, W) tensors.  Each query
attends to k*k keys taken from a dilated lattice around it; near the border
the lattice is translated as a rigid block so every key stays in bounds and
no query ever loses a key.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DimensionError, GeometryError
from .tensor import (
    Tensor, channel_slice, concat_channels, conv2d, crop2d, pad2d, permute,
    reshape, result, roll,
)

Dilation = Union[int, str]


def extent(k: int, dilation: int) -> int:
    """Side length covered by a k-point lattice with the given stride."""
    return k + (k - 1) * (dilation - 1)


def max_dilation(size: int, k: int) -> int:
    """Largest rate under the floor-division rule, floored at 1."""
    return max(1, size // k)


@dataclass(frozen=True)
class AttentionSpec:
    """Geometry of one head group.

    ``dilation`` is an int or ``"max"``; the latter is resolved against the
    feature map at call time.
    """
    range_k: int
    heads: int = 1
    head_dim: int = 1
    dilation: Dilation = 1

    def __post_init__(self):
        if self.range_k < 1 or self.range_k % 2 == 0:
            raise ConfigurationError(f"range size must be odd and >= 1, got {self.range_k}")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigurationError("heads and head_dim must be >= 1")
        if self.dilation != "max" and (not isinstance(self.dilation, (int, np.integer)) or self.dilation < 1):
            raise ConfigurationError(f"dilation must be an int >= 1 or 'max', got {self.dilation!r}")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim

    @property
    def table_side(self) -> int:
        return 2 * self.range_k - 1

    def resolve(self, h: int, w: int) -> int:
        if self.dilation == "max":
            return max_dilation(min(h, w), self.range_k)
        return int(self.dilation)


def check_geometry(k: int, dilation: int, h: int, w: int) -> None:
    kd = extent(k, dilation)
    if kd > min(h, w):
        raise GeometryError(
            f"neighbourhood k={k}, dilation={dilation} spans {kd} pixels but the "
            f"feature map is only {h}x{w}; use a smaller dilation or the 'max' policy")


def _axis_keys(n: int, k: int, dilation: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis key coordinates (n, k) and their table offsets (n, k)."""
    half = k // 2
    pos = np.arange(n)
    start = np.clip(pos - half * dilation, 0, n - extent(k, dilation))
    keys = start[:, None] + dilation * np.arange(k)[None, :]
    rel = np.floor_divide(keys - pos[:, None], dilation) + (k - 1)
    return keys, rel


def neighborhood_indices(i: int, j: int, k: int, dilation: int, h: int, w: int) -> list[tuple[int, int]]:
    """Key coordinates attended by query (i, j), row-major over the lattice."""
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"range size must be odd, got {k}")
    check_geometry(k, dilation, h, w)
    ki, _ = _axis_keys(h, k, dilation)
    kj, _ = _axis_keys(w, k, dilation)
    return [(int(a), int(b)) for a in ki[i] for b in kj[j]]


@functools.lru_cache(maxsize=256)
def neighborhood_table(h: int, w: int, k: int, dilation: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat key indices (H*W, k*k) and flat bias-table indices (H*W, k*k)."""
    check_geometry(k, dilation, h, w)
    ki, ri = _axis_keys(h, k, dilation)
    kj, rj = _axis_keys(w, k, dilation)
    keys = (ki[:, None, :, None] * w + kj[None, :, None, :]).reshape(h * w, k * k)
    side = 2 * k - 1
    rel = (ri[:, None, :, None] * side + rj[None, :, None, :]).reshape(h * w, k * k)
    keys.setflags(write=False)
    rel.setflags(write=False)
    return keys, rel


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, heads, c // heads, h * w).transpose(0, 1, 3, 2)


def _merge_heads(x: np.ndarray, shape: tuple) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2)).reshape(shape)


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def neighborhood_attention(q: Tensor, kk: Tensor, v: Tensor, k: int, dilation: int,
                           heads: int, bias_table: Tensor | None = None) -> Tensor:
    """softmax(q . K_nbr / sqrt(d) + B) V_nbr at every site, for each head."""
    for t, nm in ((q, "q"), (kk, "k"), (v, "v")):
        if t.ndim != 4:
            raise DimensionError(f"{nm} must be (N, C, H, W), got {t.shape}")
    if not (q.shape == kk.shape == v.shape):
        raise DimensionError(f"q/k/v shapes differ: {q.shape}, {kk.shape}, {v.shape}")
    n, c, h, w = q.shape
    if c % heads:
        raise ConfigurationError(f"{c} channels cannot be split into {heads} heads")
    d = c // heads
    side = 2 * k - 1
    if bias_table is not None and bias_table.shape != (heads, side, side):
        raise DimensionError(f"bias table must be {(heads, side, side)}, got {bias_table.shape}")
    keys, rel = neighborhood_table(h, w, k, dilation)
    p, k2 = keys.shape
    sc = 1.0 / np.sqrt(d)
    dt = q.dtype
    # (n * heads, p, d) row-major views for the compiled kernels
    qh, kh, vh = (np.ascontiguousarray(_split_heads(t.data.astype(dt, copy=False), heads)).reshape(n * heads, p, d)
                  for t in (q, kk, v))
    has_bias = bias_table is not None
    table = (bias_table.data.reshape(heads, -1).astype(np.float64) if has_bias
             else np.zeros((heads, 1)))
    oh = np.empty((n * heads, p, d), dtype=dt)
    attn = np.empty((n * heads, p, k2))
    _kernels.na_forward(qh, kh, vh, keys, rel, table, has_bias, sc, oh, attn)
    out = _merge_heads(oh.reshape(n, heads, p, d), q.shape)

    def backward(g):
        go = np.ascontiguousarray(_split_heads(g.astype(dt, copy=False), heads)).reshape(n * heads, p, d)
        gq, gk, gv = (np.zeros((n * heads, p, d)) for _ in range(3))
        gb = np.zeros((heads, side * side))
        _kernels.na_backward(qh, kh, vh, keys, rel, attn, go, sc, heads, gq, gk, gv, gb)
        grads = [_merge_heads(t.reshape(n, heads, p, d), q.shape).astype(dt) for t in (gq, gk, gv)]
        if has_bias:
            grads.append(gb.reshape(bias_table.shape).astype(bias_table.dtype))
        return tuple(grads)

    inputs = (q, kk, v) if bias_table is None else (q, kk, v, bias_table)
    return result(out, inputs, backward)


def regional_attention(q: Tensor, kk: Tensor, v: Tensor, spec: AttentionSpec,
                       bias_table: Tensor | None = None) -> Tensor:
    """Dense k x k sliding-window attention (unit dilation)."""
    if spec.dilation != 1:
        raise ConfigurationError("regional attention requires dilation 1; use sparse_global_attention")
    return neighborhood_attention(q, kk, v, spec.range_k, 1, spec.heads, bias_table)


def sparse_global_attention(q: Tensor, kk: Tensor, v: Tensor, spec: AttentionSpec,
                            bias_table: Tensor | None = None) -> Tensor:
    """Attention over a dilated k x k lattice; identical to RA at dilation 1."""
    dil = spec.resolve(q.shape[2], q.shape[3])
    return neighborhood_attention(q, kk, v, spec.range_k, dil, spec.heads, bias_table)


def multi_range_attention(x: Tensor, specs: Sequence[AttentionSpec], qkv_proj: Tensor,
                          fuse_proj: tuple[Tensor, Tensor | None],
                          bias_tables: Sequence[Tensor | None] | None = None,
                          sparse: bool = False) -> Tensor:
    """Project to Q/K/V, run one head group per spec, concatenate, fuse.

    With ``sparse=False`` every group runs at unit dilation (MA); otherwise
    each group uses its own resolved dilation (SMA).
    """
    c = x.shape[1]
    width = sum(s.channels for s in specs)
    if width != c:
        raise ConfigurationError(f"head groups cover {width} channels but the input has {c}")
    if qkv_proj.shape != (3 * c, c, 1, 1):
        raise DimensionError(f"qkv projection must be {(3 * c, c, 1, 1)}, got {qkv_proj.shape}")
    if bias_tables is None:
        bias_tables = [None] * len(specs)
    qkv = conv2d(x, qkv_proj)
    outs, off = [], 0
    for spec, table in zip(specs, bias_tables):
        sl = slice(off, off + spec.channels)
        q = channel_slice(qkv, sl.start, sl.stop)
        kk = channel_slice(qkv, c + sl.start, c + sl.stop)
        v = channel_slice(qkv, 2 * c + sl.start, 2 * c + sl.stop)
        if sparse:
            outs.append(sparse_global_attention(q, kk, v, spec, table))
        else:
            outs.append(neighborhood_attention(q, kk, v, spec.range_k, 1, spec.heads, table))
        off += spec.channels
    fw, fb = fuse_proj
    return conv2d(concat_channels(outs), fw, fb)


# ---------------------------------------------------------------------------
# window attention baseline
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _window_rel_index(wh: int, ww: int, side_k: int) -> np.ndarray:
    """(L, L) indices into a (2*side_k-1)^2 table for a wh x ww window."""
    coords = np.stack(np.meshgrid(np.arange(wh), np.arange(ww), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (side_k - 1)
    return rel[0] * (2 * side_k - 1) + rel[1]


def dense_attention(q: Tensor, kk: Tensor, v: Tensor, bias_table: Tensor | None = None,
                    rel_index: np.ndarray | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Full softmax attention on (B, heads, L, d) blocks.

    ``bias_table`` (heads, T) is gathered with ``rel_index`` (L, L);
    ``mask`` (nW, L, L) is a constant additive term with B = N * nW.
    """
    b, heads, length, d = q.shape
    sc = 1.0 / np.sqrt(d)
    logits = np.matmul(q.data, kk.data.transpose(0, 1, 3, 2)) * sc
    if bias_table is not None:
        logits += bias_table.data.reshape(heads, -1)[:, rel_index][None]
    if mask is not None:
        nw = mask.shape[0]
        logits = (logits.reshape(b // nw, nw, heads, length, length) + mask[None, :, None]).reshape(logits.shape)
    attn = _softmax(logits)
    out = np.matmul(attn, v.data)

    def backward(g):
        dattn = np.matmul(g, v.data.transpose(0, 1, 3, 2))
        dlog = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        gq = np.matmul(dlog, kk.data) * sc
        gk = np.matmul(dlog.transpose(0, 1, 3, 2), q.data) * sc
        gv = np.matmul(attn.transpose(0, 1, 3, 2), g)
        gb = None
        if bias_table is not None and bias_table.requires_grad:
            dl = dlog.sum(axis=0).reshape(heads, -1)
            flat = rel_index.ravel()
            t = bias_table.data.reshape(heads, -1).shape[1]
            gb = np.stack([np.bincount(flat, weights=dl[i], minlength=t) for i in range(heads)])
            gb = gb.reshape(bias_table.shape)
        return gq, gk, gv, gb

    inputs = (q, kk, v) if bias_table is None else (q, kk, v, bias_table)
    return result(out, inputs, backward)


def _shift_mask(hp: int, wp: int, wh: int, ww: int, sh: int, sw: int) -> np.ndarray:
    img = np.zeros((hp, wp), dtype=np.int64)
    label = 0
    for hs in (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)):
        for ws in (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)):
            img[hs, ws] = label
            label += 1
    win = img.reshape(hp // wh, wh, wp // ww, ww).transpose(0, 2, 1, 3).reshape(-1, wh * ww)
    return np.where(win[:, :, None] != win[:, None, :], -100.0, 0.0)


def _partition(x: Tensor, heads: int, wh: int, ww: int) -> Tensor:
    n, c, hp, wp = x.shape
    t = reshape(x, (n, heads, c // heads, hp // wh, wh, wp // ww, ww))
    t = permute(t, (0, 3, 5, 1, 4, 6, 2))
    return reshape(t, (n * (hp // wh) * (wp // ww), heads, wh * ww, c // heads))


def _unpartition(x: Tensor, shape: tuple, heads: int, wh: int, ww: int) -> Tensor:
    n, c, hp, wp = shape
    t = reshape(x, (n, hp // wh, wp // ww, heads, wh, ww, c // heads))
    t = permute(t, (0, 3, 6, 1, 4, 2, 5))
    return reshape(t, shape)


def window_attention_baseline(x: Tensor, qkv_proj: Tensor, proj: tuple[Tensor, Tensor | None],
                              heads: int, window: int = 8, shifted: bool = False,
                              bias_table: Tensor | None = None) -> Tensor:
    """Non-overlapping window attention with optional half-window cyclic shift.

    Maps that do not divide into windows are zero padded and cropped back.
    When one window covers the whole map, the shift is dropped.
    """
    n, c, h, w = x.shape
    if c % heads:
        raise ConfigurationError(f"{c} channels cannot be split into {heads} heads")
    wh, ww = min(window, h), min(window, w)
    single = wh == h and ww == w
    qkv = conv2d(x, qkv_proj)
    hp, wp = -(-h // wh) * wh, -(-w // ww) * ww
    qkv = pad2d(qkv, hp - h, wp - w)
    sh, sw = (0, 0) if (single or not shifted) else (wh // 2, ww // 2)
    if sh or sw:
        qkv = roll(qkv, (-sh, -sw), (2, 3))
    q, kk, v = (_partition(channel_slice(qkv, i * c, (i + 1) * c), heads, wh, ww) for i in range(3))
    mask = _shift_mask(hp, wp, wh, ww, sh, sw).astype(x.dtype) if (sh or sw) else None
    rel = _window_rel_index(wh, ww, window) if bias_table is not None else None
    out = dense_attention(q, kk, v, bias_table, rel, mask)
    out = _unpartition(out, (n, c, hp, wp), heads, wh, ww)
    if sh or sw:
        out = roll(out, (sh, sw), (2, 3))
    out = crop2d(out, h, w)
    pw, pb = proj
    return conv2d(out, pw, pb)
