"""Parameter counts, Multi-Adds estimates and effective-receptive-field maps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .blocks import SMA, mab_modes
from .errors import MatError, ValidationError
from .model import MATModel, ModelConfig, mat_forward, param_shapes
from .tensor import Tape, Tensor, precision


@dataclass
class CostEntry:
    name: str
    params: int
    multi_adds: int


@dataclass
class CostReport:
    entries: list = field(default_factory=list)
    out_h: int | None = None
    out_w: int | None = None

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_multi_adds(self) -> int:
        return sum(e.multi_adds for e in self.entries)

    def table(self) -> str:
        res = f" at {self.out_w}x{self.out_h} output" if self.out_h else ""
        lines = [f"{'module':<24}{'params':>12}{'multi-adds':>18}"]
        lines.append("-" * len(lines[0]))
        for e in self.entries:
            lines.append(f"{e.name:<24}{e.params:>12,}{e.multi_adds:>18,}")
        lines.append("-" * len(lines[0]))
        lines.append(f"{'TOTAL':<24}{self.total_params:>12,}{self.total_multi_adds:>18,}")
        lines.append(f"params {self.total_params / 1e3:.1f}K, multi-adds {self.total_multi_adds / 1e9:.2f}G{res}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"out_h": self.out_h, "out_w": self.out_w,
                           "total_params": self.total_params, "total_multi_adds": self.total_multi_adds,
                           "modules": [e.__dict__ for e in self.entries]}, indent=2)


def module_of(name: str, fine: bool = False) -> str:
    """Group a parameter name: 'rmag.2.mab.1.attn.qkv.weight' -> 'rmag.2' (or 'rmag.2.mab.1')."""
    parts = name.split(".")
    if parts[0] != "rmag":
        return parts[0]
    if not fine:
        return ".".join(parts[:2])
    return ".".join(parts[:4] if parts[2] == "mab" else parts[:3])


def _shapes_of(obj) -> dict:
    if isinstance(obj, MATModel):
        return {k: tuple(v.shape) for k, v in obj.params.items()}
    if isinstance(obj, ModelConfig):
        return param_shapes(obj)
    if isinstance(obj, dict):
        return {k: tuple(getattr(v, "shape", v)) for k, v in obj.items()}
    raise ValidationError(f"cannot count parameters of {type(obj).__name__}")


def count_params(obj: Union[MATModel, ModelConfig, dict], fine: bool = False) -> CostReport:
    """Element counts per module (shapes only, weight values never read)."""
    groups: dict[str, int] = {}
    for name, shape in _shapes_of(obj).items():
        key = module_of(name, fine)
        groups[key] = groups.get(key, 0) + int(np.prod(shape, dtype=np.int64))
    return CostReport([CostEntry(k, v, 0) for k, v in groups.items()])


def conv_macs(weight_shape: tuple, h: int, w: int, depthwise: bool = False) -> int:
    """One multiply-accumulate per weight tap per output site."""
    o, i, kh, kw = weight_shape
    per_site = o * kh * kw if depthwise else o * i * kh * kw
    return int(per_site) * h * w


def attention_macs(k: int, head_dim: int, h: int, w: int) -> int:
    """QK^T plus AV for one head: 2 k^2 d per site."""
    return 2 * k * k * head_dim * h * w


def multi_adds(cfg: ModelConfig, out_h: int = 720, out_w: int = 1280, fine: bool = False) -> CostReport:
    """Analytic MAC count for producing one ``out_w x out_h`` image.

    Convolutions, 1x1 projections and attention products count; norms,
    softmax, activations, biases and element-wise products do not.  The
    channel-attention MLP runs once per image on a pooled vector.  The LR
    grid is ``floor(out / scale)`` on each axis.
    """
    if out_h < cfg.scale or out_w < cfg.scale:
        raise ValidationError(f"output {out_w}x{out_h} is smaller than one x{cfg.scale} LR pixel")
    h, w = out_h // cfg.scale, out_w // cfg.scale  # LR grid, floored when not divisible
    shapes = param_shapes(cfg)
    params: dict[str, int] = {}
    macs: dict[str, int] = {}
    for name, shape in shapes.items():
        key = module_of(name, fine)
        params[key] = params.get(key, 0) + int(np.prod(shape, dtype=np.int64))
        macs.setdefault(key, 0)
        if not name.endswith(".weight") or len(shape) != 4:
            continue
        if ".ca.fc" in name:
            macs[key] += shape[0] * shape[1]
        else:
            stem = name.rsplit(".", 1)[0].rsplit(".", 1)[-1]
            macs[key] += conv_macs(shape, h, w, depthwise=stem.startswith("dw"))
    specs = cfg.attention_specs()
    per_branch = sum(s.heads * attention_macs(s.range_k, s.head_dim, h, w) for s in specs)
    branches = 2 if cfg.schedule == "parallel" else 1
    for i in range(cfg.n_rmag):
        for j in range(cfg.n_mab):
            key = module_of(f"rmag.{i}.mab.{j}.x", fine)
            macs[key] += branches * per_branch
    return CostReport([CostEntry(k, params[k], macs[k]) for k in params], out_h, out_w)


# ---------------------------------------------------------------------------
# effective receptive field
# ---------------------------------------------------------------------------

ERF_THRESHOLDS = (0.2, 0.45, 0.7)


@dataclass
class ERFResult:
    heat: np.ndarray              # (H, W), max-normalised to 1
    areas: dict                   # threshold -> fraction of pixels above it
    side99: int                   # side of the centred square holding 99% of the mass

    def summary(self) -> dict:
        return {"areas": {f"{t:g}": float(a) for t, a in self.areas.items()},
                "side99": int(self.side99), "shape": list(self.heat.shape)}


def _forward_fn(model) -> Callable[[Tensor], Tensor]:
    if isinstance(model, MATModel):
        return lambda x: mat_forward(x, model)
    if callable(model):
        return model
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def mass_square_side(heat: np.ndarray, frac: float = 0.99) -> int:
    """Smallest square centred on the map centre holding ``frac`` of the total mass."""
    h, w = heat.shape
    total = heat.sum()
    if total <= 0:
        return 0
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    for side in range(1, max(h, w) + 1):
        i0, j0 = int(np.ceil(ci - side / 2 + 0.5)), int(np.ceil(cj - side / 2 + 0.5))
        box = heat[max(i0, 0):max(i0 + side, 0), max(j0, 0):max(j0 + side, 0)]
        if box.sum() >= frac * total:
            return side
    return max(h, w)


def erf_map(model, probe: Tensor, window: int = 2,
            thresholds=ERF_THRESHOLDS) -> ERFResult:
    """|d sum(central output window) / d input|, channel-summed, max-normalised.

    A probe batch with N > 1 averages the gradient magnitude over images.
    """
    fwd = _forward_fn(model)
    with precision(np.float64):
        x = Tensor(np.array(probe.data, dtype=np.float64), requires_grad=True)
        params = model.params.values() if isinstance(model, MATModel) else ()
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            with Tape() as tape:
                y = fwd(x)
        finally:
            for p, flag in zip(params, saved):
                p.requires_grad = flag
        if not y.requires_grad:
            raise MatError("model has no recorded adjoints; ERF is unsupported for it")
        oh, ow = y.shape[-2:]
        seed = np.zeros(y.shape)
        i0, j0 = oh // 2 - window // 2, ow // 2 - window // 2
        seed[..., i0:i0 + window, j0:j0 + window] = 1.0
        (g,) = tape.gradient(y, [x], seed=seed)
    heat = np.abs(g).sum(axis=1).mean(axis=0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    areas = {t: float(np.mean(heat > t)) for t in thresholds}
    return ERFResult(heat, areas, mass_square_side(heat))


def without_sma(model: MATModel) -> MATModel:
    """Copy of ``model`` whose sparse (SMA) attention branches output zero."""
    out = model.copy()
    cfg = model.config
    for i in range(cfg.n_rmag):
        for j, mode in enumerate(mab_modes(cfg.n_mab, cfg.schedule)):
            branch = "attn" if mode == SMA else "attn_sparse" if SMA in mode else None
            if branch is None:
                continue
            for suffix in ("fuse.weight", "fuse.bias"):
                p = out.params[f"rmag.{i}.mab.{j}.{branch}.{suffix}"]
                p.data = np.zeros_like(p.data)
    return out
