"""Composite blocks: LAB, MSConvStar, MAB and RMAG.

Blocks are plain functions over a :class:`Scope` (a prefixed view into the
flat parameter dict).  Each block also has a ``*_shapes`` function listing
the parameters it reads; the model's shape ledger is assembled from these.
"""
from __future__ import annotations

from typing import Sequence

from .attention import AttentionSpec, multi_range_attention
from .tensor import (
    Tensor, add, conv2d, dwconv2d, gelu, global_avg_pool,
    layer_norm, mul, relu, sigmoid,
)

MA, SMA = "MA", "SMA"


class Scope:
    """Prefixed read access into a flat ``name -> Tensor`` dict."""

    def __init__(self, params: dict, prefix: str = ""):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.prefix + name]

    def get(self, name: str):
        return self.params.get(self.prefix + name)

    def sub(self, name: str) -> "Scope":
        return Scope(self.params, f"{self.prefix}{name}.")


def _conv_shapes(name: str, cout: int, cin: int, k: int = 1, bias: bool = True) -> dict:
    out = {f"{name}.weight": (cout, cin, k, k)}
    if bias:
        out[f"{name}.bias"] = (cout,)
    return out


def _prefixed(prefix: str, shapes: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


# ---------------------------------------------------------------------------
# LAB
# ---------------------------------------------------------------------------

def ca_hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


def lab_shapes(channels: int, reduction: int) -> dict:
    r = ca_hidden(channels, reduction)
    shapes = _conv_shapes("conv", channels, channels)
    shapes["dw.weight"] = (channels, 1, 3, 3)
    shapes["dw.bias"] = (channels,)
    shapes.update(_conv_shapes("ca.fc1", r, channels))
    shapes.update(_conv_shapes("ca.fc2", channels, r))
    return shapes


def channel_attention(x: Tensor, p: Scope) -> Tensor:
    """Squeeze-excitation gate: pool, bottleneck MLP, sigmoid, rescale."""
    s = global_avg_pool(x)
    s = relu(conv2d(s, p["fc1.weight"], p["fc1.bias"]))
    s = sigmoid(conv2d(s, p["fc2.weight"], p["fc2.bias"]))
    return mul(x, s)


def lab_forward(x: Tensor, p: Scope) -> Tensor:
    """x + CA(DWConv3x3(Conv1x1(x)))."""
    y = conv2d(x, p["conv.weight"], p["conv.bias"])
    y = dwconv2d(y, p["dw.weight"], p["dw.bias"])
    return add(x, channel_attention(y, p.sub("ca")))


# ---------------------------------------------------------------------------
# MSConvStar
# ---------------------------------------------------------------------------

def mixer_hidden(channels: int, expansion: float) -> int:
    return max(1, int(round(channels * expansion)))


def msconvstar_shapes(channels: int, hidden: int, scales: Sequence[int]) -> dict:
    shapes = _conv_shapes("fc_a", hidden, channels)
    shapes.update(_conv_shapes("fc_b", hidden, channels))
    for s in scales:
        shapes[f"dw{s}.weight"] = (hidden, 1, s, s)
        shapes[f"dw{s}.bias"] = (hidden,)
    shapes.update(_conv_shapes("proj", channels, hidden))
    return shapes


def msconvstar_forward(x: Tensor, p: Scope, scales: Sequence[int]) -> Tensor:
    """proj((MSConv(gelu(W_a x))) * (W_b x)), MSConv = id + sum of depth-wise branches."""
    a = gelu(conv2d(x, p["fc_a.weight"], p["fc_a.bias"]))
    b = conv2d(x, p["fc_b.weight"], p["fc_b.bias"])
    ms = a
    for s in scales:
        ms = add(ms, dwconv2d(a, p[f"dw{s}.weight"], p[f"dw{s}.bias"]))
    return conv2d(mul(ms, b), p["proj.weight"], p["proj.bias"])


# ---------------------------------------------------------------------------
# MAB
# ---------------------------------------------------------------------------

def attention_shapes(channels: int, specs: Sequence[AttentionSpec]) -> dict:
    shapes = {"qkv.weight": (3 * channels, channels, 1, 1)}
    for g, s in enumerate(specs):
        shapes[f"rpb.{g}"] = (s.heads, s.table_side, s.table_side)
    shapes.update(_conv_shapes("fuse", channels, channels))
    return shapes


def mab_shapes(channels: int, specs: Sequence[AttentionSpec], hidden: int,
               scales: Sequence[int], parallel: bool = False) -> dict:
    shapes = {"norm1.weight": (channels,), "norm1.bias": (channels,)}
    shapes.update(_prefixed("attn", attention_shapes(channels, specs)))
    if parallel:
        shapes.update(_prefixed("attn_sparse", attention_shapes(channels, specs)))
    shapes.update({"norm2.weight": (channels,), "norm2.bias": (channels,)})
    shapes.update(_prefixed("mixer", msconvstar_shapes(channels, hidden, scales)))
    return shapes


def attention_branch(x: Tensor, p: Scope, specs: Sequence[AttentionSpec], sparse: bool) -> Tensor:
    tables = [p[f"rpb.{g}"] for g in range(len(specs))]
    return multi_range_attention(x, specs, p["qkv.weight"], (p["fuse.weight"], p["fuse.bias"]),
                                 tables, sparse=sparse)


def mab_forward(x: Tensor, p: Scope, specs: Sequence[AttentionSpec], mode: str,
                scales: Sequence[int], eps: float = 1e-6) -> Tensor:
    """Pre-norm block: x + Attn(LN x), then x + MSConvStar(LN x).

    ``mode`` is MA, SMA, or "MA+SMA" (both attention branches summed).
    """
    h = layer_norm(x, p["norm1.weight"], p["norm1.bias"], eps)
    if mode == MA:
        x = add(x, attention_branch(h, p.sub("attn"), specs, sparse=False))
    elif mode == SMA:
        x = add(x, attention_branch(h, p.sub("attn"), specs, sparse=True))
    else:
        x = add(x, attention_branch(h, p.sub("attn"), specs, sparse=False))
        x = add(x, attention_branch(h, p.sub("attn_sparse"), specs, sparse=True))
    h = layer_norm(x, p["norm2.weight"], p["norm2.bias"], eps)
    return add(x, msconvstar_forward(h, p.sub("mixer"), scales))


# ---------------------------------------------------------------------------
# RMAG
# ---------------------------------------------------------------------------

def mab_modes(n_mab: int, schedule: str = "alternate") -> list[str]:
    """MA, SMA, MA, ... for the alternating schedule; both branches otherwise."""
    if schedule == "parallel":
        return ["MA+SMA"] * n_mab
    return [MA if j % 2 == 0 else SMA for j in range(n_mab)]


def rmag_shapes(channels: int, n_mab: int, specs: Sequence[AttentionSpec], hidden: int,
                scales: Sequence[int], reduction: int, schedule: str = "alternate") -> dict:
    shapes = _prefixed("lab", lab_shapes(channels, reduction))
    for j in range(n_mab):
        shapes.update(_prefixed(f"mab.{j}", mab_shapes(channels, specs, hidden, scales,
                                                       parallel=schedule == "parallel")))
    shapes.update(_conv_shapes("conv", channels, channels, 3))
    return shapes


def rmag_forward(x: Tensor, p: Scope, n_mab: int, specs: Sequence[AttentionSpec],
                 scales: Sequence[int], schedule: str = "alternate", eps: float = 1e-6) -> Tensor:
    """x + Conv3x3(MAB_m(... MAB_1(LAB(x))))."""
    y = lab_forward(x, p.sub("lab"))
    for j, mode in enumerate(mab_modes(n_mab, schedule)):
        y = mab_forward(y, p.sub(f"mab.{j}"), specs, mode, scales, eps)
    return add(x, conv2d(y, p["conv.weight"], p["conv.bias"]))

