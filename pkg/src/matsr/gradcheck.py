"""Central finite-difference verification of hand-written adjoints."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError
from .tensor import Tape, Tensor, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_coords: int
    rel_tol: float
    worst: tuple  # (input index, flat index, analytic, numeric)
    floor: float = 0.0

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"over {self.n_coords} coords (tol {self.rel_tol:g})")


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rel_tol: float = 1e-4,
               n_coords: int = 64, h: float = 1e-5, seed: int = 0,
               floor: float = 1e-7) -> GradCheckReport:
    """Compare the tape gradient of ``fn(*inputs)`` against central differences.

    The output is reduced to a scalar through a fixed random projection.  All
    inputs are cast to float64 and differentiated jointly; ``n_coords``
    coordinates are sampled uniformly from their concatenation (all of them
    when fewer exist).  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``, where the floor is at least the
    rounding resolution of the difference quotient,
    ``eps * sum|proj * f(x)| / h``, divided by ``rel_tol``: a gradient
    entry too small for f64 differences to resolve is compared in absolute
    terms at that resolution instead.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        xs = [Tensor(np.array(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
        with Tape() as tape:
            out = fn(*xs)
        if not np.all(np.isfinite(out.data)):
            raise ValidationError("grad_check: forward value is not finite")
        proj = rng.standard_normal(out.size)
        resolution = np.finfo(np.float64).eps * float(np.abs(proj * out.data.ravel()).sum()) / h
        floor = max(floor, resolution / rel_tol)
        analytic = tape.gradient(out, xs, seed=proj.reshape(out.shape))

        sizes = np.array([x.size for x in xs])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n_total = int(offsets[-1])
        picks = np.arange(n_total) if n_total <= n_coords else np.sort(
            rng.choice(n_total, size=n_coords, replace=False))

        worst_err, worst = 0.0, (0, 0, 0.0, 0.0)
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[k])
            buf = xs[k].data.reshape(-1)
            orig = buf[idx]
            buf[idx] = orig + h
            plus = fn(*xs).data.ravel().copy()
            hi = buf[idx]
            buf[idx] = orig - h
            minus = fn(*xs).data.ravel().copy()
            lo = buf[idx]
            buf[idx] = orig
            # difference the outputs first: far less cancellation than f(+) - f(-)
            num = float(np.dot(plus - minus, proj)) / (hi - lo)
            ana = float(analytic[k].reshape(-1)[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err >= worst_err:
                worst_err, worst = err, (k, idx, ana, num)
    return GradCheckReport(worst_err, worst_err <= rel_tol, len(picks), rel_tol, worst, floor)
