"""Quick oracle, gradient, metric and plumbing checks runnable without pytest."""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import oracles
from .attention import AttentionSpec, multi_range_attention, neighborhood_attention
from .blocks import Scope, lab_forward, lab_shapes, msconvstar_forward, msconvstar_shapes
from .data import bicubic_resize, psnr, ssim
from .errors import GeometryError, ValidationError
from .gradcheck import grad_check
from .model import MATModel, load_checkpoint, mat_forward, save_checkpoint, tiny_preset
from .tensor import Tensor, conv2d, dwconv2d, gelu, layer_norm, precision, sigmoid


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def check_attention_oracle(rng) -> str:
    worst = 0.0
    for k, dil, size in ((1, 1, 12), (3, 1, 12), (3, 2, 12), (5, 3, 13)):
        q, kk, v = (_rand(rng, 1, 8, size, size) for _ in range(3))
        table = _rand(rng, 2, 2 * k - 1, 2 * k - 1)
        got = neighborhood_attention(q, kk, v, k, dil, 2, table).data
        ref = oracles.neighborhood_attention_gather(q.data, kk.data, v.data, k, dil, 2, table.data)
        worst = max(worst, float(np.abs(got - ref).max()))
    assert worst <= 1e-10, f"max abs diff {worst:.2e}"
    return f"max abs diff {worst:.1e}"


def check_multi_range(rng) -> str:
    x = _rand(rng, 1, 8, 12, 12)
    specs = [AttentionSpec(3, 1, 4, 2), AttentionSpec(5, 1, 4, 1)]
    wqkv, wf, bf = _rand(rng, 24, 8, 1, 1), _rand(rng, 8, 8, 1, 1), _rand(rng, 8)
    tables = [_rand(rng, 1, 5, 5), _rand(rng, 1, 9, 9)]
    got = multi_range_attention(x, specs, wqkv, (wf, bf), tables, sparse=True).data
    qkv = np.einsum("oc,nchw->nohw", wqkv.data[:, :, 0, 0], x.data)
    parts = []
    for g, (spec, t) in enumerate(zip(specs, tables)):
        sl = slice(4 * g, 4 * g + 4)
        parts.append(oracles.neighborhood_attention_gather(
            qkv[:, sl], qkv[:, 8:16][:, sl], qkv[:, 16:24][:, sl], spec.range_k, int(spec.dilation), 1, t.data))
    ref = np.einsum("oc,nchw->nohw", wf.data[:, :, 0, 0], np.concatenate(parts, 1)) + bf.data[None, :, None, None]
    err = float(np.abs(got - ref).max())
    assert err <= 1e-10, f"max abs diff {err:.2e}"
    dense = multi_range_attention(x, [AttentionSpec(3, 1, 4, 1), AttentionSpec(5, 1, 4, 1)],
                                  wqkv, (wf, bf), tables, sparse=True).data
    plain = multi_range_attention(x, specs, wqkv, (wf, bf), tables, sparse=False).data
    assert np.array_equal(dense, plain), "SMA with unit dilations differs from MA"
    return f"max abs diff {err:.1e}; unit-dilation SMA == MA"


def check_gradients(rng) -> str:
    worst = 0.0
    cases: list[tuple[Callable, list]] = [
        (lambda x, w, b: conv2d(x, w, b), [_rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)]),
        (lambda x, w, b: dwconv2d(x, w, b), [_rand(rng, 1, 3, 6, 6), _rand(rng, 3, 1, 5, 5), _rand(rng, 3)]),
        (lambda x, g, b: layer_norm(x, g, b), [_rand(rng, 1, 4, 3, 3), _rand(rng, 4), _rand(rng, 4)]),
        (gelu, [_rand(rng, 1, 2, 4, 4)]),
        (sigmoid, [_rand(rng, 1, 2, 4, 4)]),
        (lambda q, k, v: neighborhood_attention(q, k, v, 3, 2, 2), [_rand(rng, 1, 4, 6, 6) for _ in range(3)]),
    ]
    shapes = lab_shapes(8, 4)
    lab_params = {k: _rand(rng, *s) * 0.3 for k, s in shapes.items()}
    names = list(lab_params)
    cases.append((lambda x, *ps: lab_forward(x, Scope(dict(zip(names, ps)))),
                  [_rand(rng, 1, 8, 6, 6)] + [lab_params[n] for n in names]))
    ms = {k: _rand(rng, *s) * 0.3 for k, s in msconvstar_shapes(4, 8, (3, 5)).items()}
    ms_names = list(ms)
    cases.append((lambda x, *ps: msconvstar_forward(x, Scope(dict(zip(ms_names, ps))), (3, 5)),
                  [_rand(rng, 1, 4, 6, 6)] + [ms[n] for n in ms_names]))
    for fn, inputs in cases:
        rep = grad_check(fn, inputs, seed=int(rng.integers(1 << 30)))
        assert rep.passed, str(rep)
        worst = max(worst, rep.max_rel_error)
    return f"{len(cases)} cases, max rel err {worst:.1e}"


def check_model_gradient(rng) -> str:
    model = MATModel.create(tiny_preset(), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    names = list(model.params)
    x = Tensor(rng.random((1, 3, 8, 8)), dtype=np.float64)
    rep = grad_check(lambda x, *ps: mat_forward(x, MATModel(model.config, dict(zip(names, ps)))),
                     [x] + [model.params[n] for n in names], n_coords=96)
    assert rep.passed, str(rep)
    return f"tiny model, max rel err {rep.max_rel_error:.1e}"


def check_metrics(rng) -> str:
    for _ in range(5):
        a, b = rng.random((24, 24)), rng.random((24, 24))
        assert abs(psnr(a, b, 2) - oracles.psnr_formula(a, b, 2)) <= 1e-6
        assert abs(ssim(a, b, 2) - oracles.ssim_sliding(a, b, 2)) <= 1e-4
    assert psnr(a, a) == 100.0 and ssim(a, a) == 1.0
    img = rng.random((9, 10))
    err = float(np.abs(bicubic_resize(img, 4, 5) - oracles.resize_direct(img, 4, 5)).max())
    assert err <= 1e-6, f"bicubic diff {err:.2e}"
    return f"psnr/ssim/bicubic agree with oracles (bicubic diff {err:.1e})"


def check_geometry(rng) -> str:
    spec_d = [AttentionSpec(k, 2, 10, "max").resolve(64, 64) for k in (7, 9, 11)]
    assert spec_d == [9, 7, 5], spec_d
    q = _rand(rng, 1, 2, 12, 12)
    try:
        neighborhood_attention(q, q, q, 5, 3, 1)
    except GeometryError:
        pass
    else:
        raise AssertionError("oversized neighbourhood was accepted")
    return "max dilations on 64x64 = 9, 7, 5; oversized extent rejected"


def check_checkpoint(rng) -> str:
    model = MATModel.create(tiny_preset(), seed=int(rng.integers(1 << 30)))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, path, step=7)
        back = load_checkpoint(path, model.config)
    same = all(model.params[k].data.tobytes() == back.params[k].data.tobytes() for k in model.params)
    assert same, "roundtrip changed a parameter"
    return f"{len(model.params)} tensors bit-identical"


SUITES = {
    "attention-oracle": check_attention_oracle,
    "multi-range": check_multi_range,
    "gradients": check_gradients,
    "model-gradient": check_model_gradient,
    "metrics": check_metrics,
    "geometry": check_geometry,
    "checkpoint": check_checkpoint,
}


def run_selftest(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    unknown = sorted(set(only or ()) - set(SUITES))
    if unknown:
        raise ValidationError(f"unknown selftest suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, len(results)])
        t0 = time.perf_counter()
        try:
            with precision(np.float64):
                detail = fn(rng)
            ok = True
        except AssertionError as err:
            ok, detail = False, str(err) or "assertion failed"
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results
