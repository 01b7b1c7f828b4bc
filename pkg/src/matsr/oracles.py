"""Slow, loop-based reference implementations.

Nothing here shares code with the vectorised kernels it is used to check.
Inputs and outputs are plain numpy arrays; everything is computed in
float64 unless the caller passes something else.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None):
    """Direct six-fold summation, zero same-padding."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, o, h, wd))
    for bn in range(n):
        for oc in range(o):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                ii, jj = i + di - ph, j + dj - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(x[bn, ic, ii, jj]) * float(w[oc, ic, di, dj])
                    out[bn, oc, i, j] = acc
    return out


def layer_norm_two_pass(x, gamma, beta, eps=1e-6):
    n, c, h, w = x.shape
    out = np.zeros(x.shape)
    for bn in range(n):
        for i in range(h):
            for j in range(w):
                vec = [float(x[bn, ch, i, j]) for ch in range(c)]
                mu = sum(vec) / c
                var = sum((t - mu) ** 2 for t in vec) / c
                for ch in range(c):
                    out[bn, ch, i, j] = (vec[ch] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def lattice(pos: int, size: int, k: int, dilation: int) -> list[int]:
    """Key coordinates along one axis: centred lattice, shifted inside [0, size)."""
    span = (k - 1) * dilation
    lo = pos - (k // 2) * dilation
    lo = min(max(lo, 0), size - 1 - span)
    return [lo + t * dilation for t in range(k)]


def neighborhood_attention_gather(q, kk, v, k, dilation, heads, bias=None):
    """Gather each query's neighbourhood explicitly, then dense softmax."""
    n, c, h, w = q.shape
    d = c // heads
    out = np.zeros(q.shape)
    for bn in range(n):
        for hd in range(heads):
            ch = slice(hd * d, (hd + 1) * d)
            for i in range(h):
                rows = lattice(i, h, k, dilation)
                for j in range(w):
                    cols = lattice(j, w, k, dilation)
                    qv = q[bn, ch, i, j].astype(np.float64)
                    logits, vals = [], []
                    for a in rows:
                        for bcol in cols:
                            s = float(np.dot(qv, kk[bn, ch, a, bcol])) / math.sqrt(d)
                            if bias is not None:
                                s += bias[hd, (a - i) // dilation + k - 1, (bcol - j) // dilation + k - 1]
                            logits.append(s)
                            vals.append(v[bn, ch, a, bcol].astype(np.float64))
                    logits = np.array(logits)
                    wts = np.exp(logits - logits.max())
                    wts /= wts.sum()
                    out[bn, ch, i, j] = np.sum(wts[:, None] * np.array(vals), axis=0)
    return out


def global_attention(q, kk, v, heads):
    """Plain softmax(QK^T / sqrt(d)) V over all H*W positions."""
    n, c, h, w = q.shape
    d = c // heads
    out = np.zeros(q.shape)
    for bn in range(n):
        for hd in range(heads):
            ch = slice(hd * d, (hd + 1) * d)
            qm = q[bn, ch].reshape(d, -1).T.astype(np.float64)
            km = kk[bn, ch].reshape(d, -1).T.astype(np.float64)
            vm = v[bn, ch].reshape(d, -1).T.astype(np.float64)
            s = qm @ km.T / math.sqrt(d)
            s = np.exp(s - s.max(axis=1, keepdims=True))
            s /= s.sum(axis=1, keepdims=True)
            out[bn, ch] = (s @ vm).T.reshape(d, h, w)
    return out


def cubic(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def _mirror(idx: int, n: int) -> int:
    period = 2 * n
    idx %= period
    return idx if idx < n else period - 1 - idx


def resize_1d_direct(signal, out_len: int) -> np.ndarray:
    """Cubic resampling of one line, antialiased on downscale, mirrored edges."""
    n = len(signal)
    s = out_len / n
    out = np.zeros(out_len)
    width = 4.0 / s if s < 1 else 4.0
    for o in range(out_len):
        centre = (o + 0.5) / s - 0.5  # 0-based source coordinate
        first = math.floor(centre - width / 2)
        last = math.ceil(centre + width / 2)
        taps, wts = [], []
        for src in range(first, last + 1):
            dist = centre - src
            wt = s * cubic(s * dist) if s < 1 else cubic(dist)
            if wt != 0.0:
                taps.append(_mirror(src, n))
                wts.append(wt)
        tot = sum(wts)
        out[o] = sum(wt * float(signal[t]) for wt, t in zip(wts, taps)) / tot
    return out


def resize_direct(img, out_h: int, out_w: int) -> np.ndarray:
    """Separable direct-kernel resize of a 2-D array (rows then columns)."""
    img = np.asarray(img, dtype=np.float64)
    tmp = np.stack([resize_1d_direct(img[:, j], out_h) for j in range(img.shape[1])], axis=1)
    return np.stack([resize_1d_direct(tmp[i], out_w) for i in range(out_h)], axis=0)


def psnr_formula(a, b, crop: int = 0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if crop:
        a = a[..., crop:-crop, crop:-crop]
        b = b[..., crop:-crop, crop:-crop]
    mse = float(np.mean((a - b) ** 2))
    return 100.0 if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim_sliding(a, b, crop: int = 0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM by explicitly visiting each valid 11x11 window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if crop:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma, mb = np.sum(win * pa), np.sum(win * pb)
            va = np.sum(win * pa * pa) - ma * ma
            vb = np.sum(win * pb * pb) - mb * mb
            cov = np.sum(win * pa * pb) - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))
