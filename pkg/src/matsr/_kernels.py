"""Compiled inner loops for the memory-bound depth-wise convolution."""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def dw_forward(xp: np.ndarray, wk: np.ndarray, out: np.ndarray) -> None:
    """out[n,c,y,x] += sum_ij wk[c,i,j] * xp[n,c,y+i,x+j] (xp already padded)."""
    n, c, h, w = out.shape
    kh, kw = wk.shape[1], wk.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wt = wk[ch, i, j]
                    for y in range(h):
                        for x in range(w):
                            out[b, ch, y, x] += wt * xp[b, ch, y + i, x + j]


@numba.njit(cache=True)
def dw_grad_input(g: np.ndarray, wk: np.ndarray, gxp: np.ndarray) -> None:
    """Scatter the output gradient back onto the padded input grid."""
    n, c, h, w = g.shape
    kh, kw = wk.shape[1], wk.shape[2]
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wt = wk[ch, i, j]
                    for y in range(h):
                        for x in range(w):
                            gxp[b, ch, y + i, x + j] += wt * g[b, ch, y, x]


@numba.njit(cache=True, fastmath=True)
def dw_grad_weight(g: np.ndarray, xp: np.ndarray, gw: np.ndarray) -> None:
    """gw[c,i,j] = sum over n,y,x of g * shifted input, accumulated in float64."""
    n, c, h, w = g.shape
    kh, kw = gw.shape[1], gw.shape[2]
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for b in range(n):
                    for y in range(h):
                        for x in range(w):
                            acc += g[b, ch, y, x] * xp[b, ch, y + i, x + j]
                gw[ch, i, j] = acc


@numba.njit(cache=True)
def na_forward(q, k, v, keys, rel, bias, has_bias, scale, out, attn):
    """Neighbourhood attention over (B, P, d) arrays, B = batch * heads.

    ``keys[p]`` lists the flat key sites of query p and ``rel[p]`` their
    bias-table slots; ``bias`` is (heads, table) and head = b % heads.
    Stores the softmax weights in ``attn`` (B, P, K) for the backward pass.
    """
    nb, npos, d = q.shape
    nk = keys.shape[1]
    heads = bias.shape[0]
    logits = np.empty(nk)
    acc = np.empty(d)
    for b in range(nb):
        hd = b % heads
        for p in range(npos):
            mx = -np.inf
            for s in range(nk):
                kp = keys[p, s]
                dot = 0.0
                for c in range(d):
                    dot += q[b, p, c] * k[b, kp, c]
                dot *= scale
                if has_bias:
                    dot += bias[hd, rel[p, s]]
                logits[s] = dot
                if dot > mx:
                    mx = dot
            tot = 0.0
            for s in range(nk):
                e = np.exp(logits[s] - mx)
                logits[s] = e
                tot += e
            acc[:] = 0.0
            for s in range(nk):
                a = logits[s] / tot
                attn[b, p, s] = a
                kp = keys[p, s]
                for c in range(d):
                    acc[c] += a * v[b, kp, c]
            for c in range(d):
                out[b, p, c] = acc[c]


@numba.njit(cache=True)
def na_backward(q, k, v, keys, rel, attn, g, scale, heads, gq, gk, gv, gb):
    """Adjoint of :func:`na_forward`; all gradient buffers are float64 and zeroed."""
    nb, npos, d = q.shape
    nk = keys.shape[1]
    da = np.empty(nk)
    for b in range(nb):
        hd = b % heads
        for p in range(npos):
            dsum = 0.0
            for s in range(nk):
                kp = keys[p, s]
                dot = 0.0
                for c in range(d):
                    dot += g[b, p, c] * v[b, kp, c]
                da[s] = dot
                dsum += dot * attn[b, p, s]
            for s in range(nk):
                a = attn[b, p, s]
                dl = a * (da[s] - dsum)
                gb[hd, rel[p, s]] += dl
                dls = dl * scale
                kp = keys[p, s]
                for c in range(d):
                    gq[b, p, c] += dls * k[b, kp, c]
                    gk[b, kp, c] += dls * q[b, p, c]
                    gv[b, kp, c] += a * g[b, p, c]
